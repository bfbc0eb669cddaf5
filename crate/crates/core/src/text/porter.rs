//! Porter's suffix-stripping stemmer (steps 1a through 5b), following the
//! reference implementation's rule tables.

/// Stem a lowercase ASCII word. Words of length ≤ 2 are returned unchanged.
pub fn porter_stem(word: &str) -> String {
    if word.len() <= 2 || !word.is_ascii() {
        return word.to_string();
    }
    let mut s = Stemmer {
        b: word.as_bytes().to_vec(),
    };
    s.step1ab();
    if s.b.len() > 1 {
        s.step1c();
        s.step2();
        s.step3();
        s.step4();
        s.step5();
    }
    String::from_utf8(s.b).expect("ascii in, ascii out")
}

struct Stemmer {
    b: Vec<u8>,
}

impl Stemmer {
    fn is_cons(&self, i: usize) -> bool {
        match self.b[i] {
            b'a' | b'e' | b'i' | b'o' | b'u' => false,
            b'y' => i == 0 || !self.is_cons(i - 1),
            _ => true,
        }
    }

    /// Number of VC sequences in `b[..len]`.
    fn measure(&self, len: usize) -> usize {
        let mut i = 0;
        while i < len && self.is_cons(i) {
            i += 1;
        }
        let mut m = 0;
        loop {
            while i < len && !self.is_cons(i) {
                i += 1;
            }
            if i >= len {
                return m;
            }
            while i < len && self.is_cons(i) {
                i += 1;
            }
            m += 1;
            if i >= len {
                return m;
            }
        }
    }

    fn has_vowel(&self, len: usize) -> bool {
        (0..len).any(|i| !self.is_cons(i))
    }

    fn double_cons(&self, len: usize) -> bool {
        len >= 2 && self.b[len - 1] == self.b[len - 2] && self.is_cons(len - 1)
    }

    /// cvc where the final c is not w, x or y.
    fn cvc(&self, len: usize) -> bool {
        if len < 3 || !self.is_cons(len - 1) || self.is_cons(len - 2) || !self.is_cons(len - 3) {
            return false;
        }
        !matches!(self.b[len - 1], b'w' | b'x' | b'y')
    }

    fn ends(&self, suffix: &str) -> bool {
        self.b.ends_with(suffix.as_bytes())
    }

    fn stem_len(&self, suffix: &str) -> usize {
        self.b.len() - suffix.len()
    }

    fn set_to(&mut self, suffix_len: usize, repl: &str) {
        let keep = self.b.len() - suffix_len;
        self.b.truncate(keep);
        self.b.extend_from_slice(repl.as_bytes());
    }

    /// Replace `suffix` by `repl` when the stem measure is > `min_m`.
    fn replace_if(&mut self, rules: &[(&str, &str)], min_m: usize) {
        for (suffix, repl) in rules {
            if self.ends(suffix) {
                if self.measure(self.stem_len(suffix)) > min_m {
                    self.set_to(suffix.len(), repl);
                }
                return;
            }
        }
    }

    fn step1ab(&mut self) {
        if self.ends("s") {
            if self.ends("sses") {
                self.set_to(4, "ss");
            } else if self.ends("ies") {
                self.set_to(3, "i");
            } else if !self.ends("ss") {
                self.b.pop();
            }
        }
        if self.ends("eed") {
            if self.measure(self.stem_len("eed")) > 0 {
                self.b.pop();
            }
            return;
        }
        let cut = if self.ends("ed") && self.has_vowel(self.stem_len("ed")) {
            2
        } else if self.ends("ing") && self.has_vowel(self.stem_len("ing")) {
            3
        } else {
            return;
        };
        self.set_to(cut, "");
        if self.ends("at") || self.ends("bl") || self.ends("iz") {
            self.b.push(b'e');
        } else if self.double_cons(self.b.len()) {
            if !matches!(self.b[self.b.len() - 1], b'l' | b's' | b'z') {
                self.b.pop();
            }
        } else if self.measure(self.b.len()) == 1 && self.cvc(self.b.len()) {
            self.b.push(b'e');
        }
    }

    fn step1c(&mut self) {
        if self.ends("y") && self.has_vowel(self.b.len() - 1) {
            let n = self.b.len();
            self.b[n - 1] = b'i';
        }
    }

    fn step2(&mut self) {
        const RULES: &[(&str, &str)] = &[
            ("ational", "ate"),
            ("tional", "tion"),
            ("enci", "ence"),
            ("anci", "ance"),
            ("izer", "ize"),
            ("bli", "ble"),
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
            ("logi", "log"),
        ];
        // Longest match first within the shared-suffix groups.
        let mut rules: Vec<&(&str, &str)> = RULES.iter().collect();
        rules.sort_by_key(|(s, _)| std::cmp::Reverse(s.len()));
        for (suffix, repl) in rules {
            if self.ends(suffix) {
                if self.measure(self.stem_len(suffix)) > 0 {
                    self.set_to(suffix.len(), repl);
                }
                return;
            }
        }
    }

    fn step3(&mut self) {
        self.replace_if(
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
        const SUFFIXES: &[&str] = &[
            "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment", "ent", "ion",
            "ou", "ism", "ate", "iti", "ous", "ive", "ize",
        ];
        let mut sorted: Vec<&str> = SUFFIXES.to_vec();
        sorted.sort_by_key(|s| std::cmp::Reverse(s.len()));
        for suffix in sorted {
            if self.ends(suffix) {
                let k = self.stem_len(suffix);
                if suffix == "ion" && !(k > 0 && matches!(self.b[k - 1], b's' | b't')) {
                    return;
                }
                if self.measure(k) > 1 {
                    self.b.truncate(k);
                }
                return;
            }
        }
    }

    fn step5(&mut self) {
        if self.ends("e") {
            let k = self.b.len() - 1;
            let m = self.measure(k);
            if m > 1 || (m == 1 && !self.cvc(k)) {
                self.b.truncate(k);
            }
        }
        let n = self.b.len();
        if self.b[n - 1] == b'l' && self.double_cons(n) && self.measure(n) > 1 {
            self.b.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::porter_stem;

    // Pairs drawn from the published Porter test vocabulary and its output.
    const REFERENCE: &[(&str, &str)] = &[
        ("caresses", "caress"),
        ("ponies", "poni"),
        ("ties", "ti"),
        ("caress", "caress"),
        ("cats", "cat"),
        ("feed", "feed"),
        ("agreed", "agre"),
        ("plastered", "plaster"),
        ("bled", "bled"),
        ("motoring", "motor"),
        ("sing", "sing"),
        ("conflated", "conflat"),
        ("troubled", "troubl"),
        ("sized", "size"),
        ("hopping", "hop"),
        ("tanned", "tan"),
        ("falling", "fall"),
        ("hissing", "hiss"),
        ("fizzed", "fizz"),
        ("failing", "fail"),
        ("filing", "file"),
        ("happy", "happi"),
        ("sky", "sky"),
        ("relational", "relat"),
        ("conditional", "condit"),
        ("rational", "ration"),
        ("valenci", "valenc"),
        ("hesitanci", "hesit"),
        ("digitizer", "digit"),
        ("conformabli", "conform"),
        ("radicalli", "radic"),
        ("differentli", "differ"),
        ("vileli", "vile"),
        ("analogousli", "analog"),
        ("vietnamization", "vietnam"),
        ("predication", "predic"),
        ("operator", "oper"),
        ("feudalism", "feudal"),
        ("decisiveness", "decis"),
        ("hopefulness", "hope"),
        ("callousness", "callous"),
        ("formaliti", "formal"),
        ("sensitiviti", "sensit"),
        ("sensibiliti", "sensibl"),
        ("triplicate", "triplic"),
        ("formative", "form"),
        ("formalize", "formal"),
        ("electriciti", "electr"),
        ("electrical", "electr"),
        ("hopeful", "hope"),
        ("goodness", "good"),
        ("revival", "reviv"),
        ("allowance", "allow"),
        ("inference", "infer"),
        ("airliner", "airlin"),
        ("gyroscopic", "gyroscop"),
        ("adjustable", "adjust"),
        ("defensible", "defens"),
        ("irritant", "irrit"),
        ("replacement", "replac"),
        ("adjustment", "adjust"),
        ("dependent", "depend"),
        ("adoption", "adopt"),
        ("homologou", "homolog"),
        ("communism", "commun"),
        ("activate", "activ"),
        ("angulariti", "angular"),
        ("homologous", "homolog"),
        ("effective", "effect"),
        ("bowdlerize", "bowdler"),
        ("probate", "probat"),
        ("rate", "rate"),
        ("cease", "ceas"),
        ("controll", "control"),
        ("roll", "roll"),
        ("generalizations", "gener"),
        ("oscillators", "oscil"),
        ("bicycle", "bicycl"),
        ("parked", "park"),
        ("sitting", "sit"),
        ("sleeping", "sleep"),
        ("knightly", "knightli"),
        ("abatements", "abat"),
    ];

    #[test]
    fn reference_vocabulary() {
        for (word, stem) in REFERENCE {
            assert_eq!(&porter_stem(word), stem, "stem({word})");
        }
    }

    #[test]
    fn idempotent_on_reference_outputs() {
        for (_, stem) in REFERENCE {
            let again = porter_stem(stem);
            assert_eq!(porter_stem(&again), again, "stem∘stem({stem})");
        }
    }

    #[test]
    fn short_words_untouched() {
        assert_eq!(porter_stem("is"), "is");
        assert_eq!(porter_stem("a"), "a");
    }
}
