//! Porter stemmer used by the METEOR stem-match stage.
//!
//! Operates on lowercase ASCII words; anything else (mixed case, digits,
//! non-ASCII) is returned unchanged so the stem stage degrades to exact
//! matching for such tokens. Words of length <= 2 are never stemmed.

struct Word {
    b: Vec<u8>,
}

impl Word {
    fn len(&self) -> usize {
        self.b.len()
    }

    // Consonant test per Porter: y is a consonant unless preceded by one.
    fn is_cons(&self, i: usize) -> bool {
        match self.b[i] {
            b'a' | b'e' | b'i' | b'o' | b'u' => false,
            b'y' => i == 0 || !self.is_cons(i - 1),
            _ => true,
        }
    }

    // Number of VC sequences in b[..len], i.e. m in [C](VC)^m[V].
    fn measure(&self, len: usize) -> usize {
        let mut m = 0;
        let mut i = 0;
        while i < len && self.is_cons(i) {
            i += 1;
        }
        while i < len {
            while i < len && !self.is_cons(i) {
                i += 1;
            }
            if i == len {
                break;
            }
            while i < len && self.is_cons(i) {
                i += 1;
            }
            m += 1;
        }
        m
    }

    fn has_vowel(&self, len: usize) -> bool {
        (0..len).any(|i| !self.is_cons(i))
    }

    fn ends_double_cons(&self, len: usize) -> bool {
        len >= 2 && self.b[len - 1] == self.b[len - 2] && self.is_cons(len - 1)
    }

    // *o: stem ends cvc where the final c is not w, x, or y.
    fn ends_cvc(&self, len: usize) -> bool {
        len >= 3
            && self.is_cons(len - 3)
            && !self.is_cons(len - 2)
            && self.is_cons(len - 1)
            && !matches!(self.b[len - 1], b'w' | b'x' | b'y')
    }

    fn ends_with(&self, suffix: &str) -> bool {
        self.b.ends_with(suffix.as_bytes())
    }

    fn truncate(&mut self, n: usize) {
        let new_len = self.len() - n;
        self.b.truncate(new_len);
    }

    fn step1a(&mut self) {
        if self.ends_with("sses") || self.ends_with("ies") {
            self.truncate(2);
        } else if self.ends_with("ss") {
            // unchanged
        } else if self.ends_with("s") {
            self.truncate(1);
        }
    }

    fn step1b(&mut self) {
        if self.ends_with("eed") {
            if self.measure(self.len() - 3) > 0 {
                self.truncate(1);
            }
        } else if self.ends_with("ed") && self.has_vowel(self.len() - 2) {
            self.truncate(2);
            self.step1b_fixup();
        } else if self.ends_with("ing") && self.has_vowel(self.len() - 3) {
            self.truncate(3);
            self.step1b_fixup();
        }
    }

    // Runs after an -ed/-ing removal.
    fn step1b_fixup(&mut self) {
        if self.ends_with("at") || self.ends_with("bl") || self.ends_with("iz") {
            self.b.push(b'e');
        } else if self.ends_double_cons(self.len())
            && !matches!(self.b[self.len() - 1], b'l' | b's' | b'z')
        {
            self.truncate(1);
        } else if self.measure(self.len()) == 1 && self.ends_cvc(self.len()) {
            self.b.push(b'e');
        }
    }

    fn step1c(&mut self) {
        if self.ends_with("y") && self.has_vowel(self.len() - 1) {
            let last = self.len() - 1;
            self.b[last] = b'i';
        }
    }

    // Steps 2-4 share the "longest matching suffix, then test the
    // condition, no fall-through" selection rule.
    fn replace_longest(&mut self, rules: &[(&str, &str)], min_measure: usize) {
        let hit = rules
            .iter()
            .filter(|(suffix, _)| self.ends_with(suffix))
            .max_by_key(|(suffix, _)| suffix.len());
        if let Some((suffix, replacement)) = hit {
            let stem_len = self.len() - suffix.len();
            if self.measure(stem_len) > min_measure {
                self.truncate(suffix.len());
                self.b.extend_from_slice(replacement.as_bytes());
            }
        }
    }

    fn step2(&mut self) {
        self.replace_longest(
            &[
                ("ational", "ate"),
                ("tional", "tion"),
                ("enci", "ence"),
                ("anci", "ance"),
                ("izer", "ize"),
                ("abli", "able"),
                ("alli", "al"),
                ("entli", "ent"),
                ("eli", "e"),
                ("ousli", "ous"),
                ("ization", "ize"),
                ("ation", "ate"),
                ("ator", "ate"),
                ("alism", "al"),
                ("iveness", "ive"),
                ("fulness", "ful"),
                ("ousness", "ous"),
                ("aliti", "al"),
                ("iviti", "ive"),
                ("biliti", "ble"),
            ],
            0,
        );
    }

    fn step3(&mut self) {
        self.replace_longest(
            &[
                ("icate", "ic"),
                ("ative", ""),
                ("alize", "al"),
                ("iciti", "ic"),
                ("ical", "ic"),
                ("ful", ""),
                ("ness", ""),
            ],
            0,
        );
    }

    fn step4(&mut self) {
        let rules: &[&str] = &[
            "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment", "ent",
            "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
        ];
        let hit = rules
            .iter()
            .filter(|suffix| self.ends_with(suffix))
            .max_by_key(|suffix| suffix.len());
        if let Some(suffix) = hit {
            let stem_len = self.len() - suffix.len();
            let extra_ok = *suffix != "ion"
                || (stem_len >= 1 && matches!(self.b[stem_len - 1], b's' | b't'));
            if self.measure(stem_len) > 1 && extra_ok {
                self.truncate(suffix.len());
            }
        }
    }

    fn step5a(&mut self) {
        if self.ends_with("e") {
            let m = self.measure(self.len() - 1);
            if m > 1 || (m == 1 && !self.ends_cvc(self.len() - 1)) {
                self.truncate(1);
            }
        }
    }

    fn step5b(&mut self) {
        if self.measure(self.len()) > 1
            && self.ends_double_cons(self.len())
            && self.b[self.len() - 1] == b'l'
        {
            self.truncate(1);
        }
    }
}

/// Stems a single lowercase ASCII word; returns other inputs unchanged.
pub fn stem(word: &str) -> String {
    if word.len() <= 2 || !word.bytes().all(|b| b.is_ascii_lowercase()) {
        return word.to_owned();
    }
    let mut w = Word {
        b: word.as_bytes().to_vec(),
    };
    w.step1a();
    w.step1b();
    w.step1c();
    w.step2();
    w.step3();
    w.step4();
    w.step5a();
    w.step5b();
    String::from_utf8(w.b).expect("stemmer operates on ASCII")
}
