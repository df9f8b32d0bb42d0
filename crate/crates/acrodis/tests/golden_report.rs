//! Golden-file regression for the results table: a fixed mock run over
//! the bundled mini-corpus must render byte-identical markdown.

use std::collections::BTreeMap;
use std::path::Path;

use acrodis::corpus::{
    annotate_corpus, filter_single_acronym, load_corpus, CorpusFormat, ExtractionRule,
};
use acrodis::inference::{MockBackend, MockBehavior};
use acrodis::pipeline::{run_single_pass, RunConfig};
use acrodis::report::{emit_tables, score_run, TableFormat};

#[test]
fn fixed_mock_report_matches_golden_markdown() {
    let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/mini_corpus.csv"));
    let corpus = load_corpus(path, CorpusFormat::Csv).unwrap();
    let rule = ExtractionRule::default();

    // Same preparation the CLI quickstart performs: mock-annotated filter
    // down to 17 single-acronym rows.
    let annotator = MockBackend::new(MockBehavior::perfect(BTreeMap::new()), &corpus.ids());
    let flags = annotate_corpus(&corpus, &annotator, &rule, 1);
    let filtered = filter_single_acronym(&corpus, &rule, Some(&flags)).corpus;
    assert_eq!(filtered.len(), 17);

    // First-sense dictionary: minority senses (m04, m07) stay wrong.
    let mut dictionary = BTreeMap::new();
    for instance in filtered.instances() {
        dictionary
            .entry(instance.acronym.clone())
            .or_insert_with(|| instance.expansion.clone());
    }
    let mock = MockBackend::new(MockBehavior::perfect(dictionary), &filtered.ids());
    let config = RunConfig::single_pass().iterations(5).run_id("golden");
    let log = run_single_pass(&filtered, &mock, &config).unwrap();
    let report = score_run(&log, &filtered).unwrap();

    let rendered = emit_tables(&report, TableFormat::Markdown);
    let golden = include_str!("data/golden_report.md");
    assert_eq!(rendered, golden);
}
