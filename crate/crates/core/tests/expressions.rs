use ltvobs_core::Expr;
use proptest::prelude::*;

/// Random well-defined expression strings; every node stays smooth and
/// bounded on `t ∈ [-2, 2]`.
fn expr_source() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (-3.0f64..3.0).prop_map(|v| format!("{v:.3}")),
        Just("t".to_string()),
        Just("pi".to_string()),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) + ({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) - ({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) * ({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}) / (2 + sin({b})*sin({b}))")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("exp(sin({a}))")),
            inner.clone().prop_map(|a| format!("sqrt(1 + ({a})*({a}))")),
            inner.prop_map(|a| format!("-({a})")),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn derivative_matches_central_difference(src in expr_source(), t in -2.0f64..2.0) {
        let e = Expr::parse(&src).unwrap();
        let h = 1e-6;
        let fd = (e.eval(t + h) - e.eval(t - h)) / (2.0 * h);
        let d = e.derivative().eval(t);
        prop_assume!(fd.is_finite() && fd.abs() < 1e3);
        prop_assert!((d - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{src}: d = {d}, fd = {fd}");
    }

    #[test]
    fn display_reparses_to_same_values(src in expr_source(), t in -2.0f64..2.0) {
        let e = Expr::parse(&src).unwrap();
        let back = Expr::parse(&e.to_string()).unwrap();
        prop_assert_eq!(e.eval(t).to_bits(), back.eval(t).to_bits());
        prop_assert_eq!(e.to_string(), back.to_string());
    }

    #[test]
    fn parser_agrees_with_reference_recognizer(
        tokens in prop::collection::vec(
            prop::sample::select(vec![
                "t", "pi", "sin", "cos", "exp", "sqrt", "x", "e", "(", ")", "+", "-", "*", "/",
                "1", "2.5", ".", "3e-2", " ", "$",
            ]),
            0..9,
        )
    ) {
        let src: String = tokens.concat();
        let ours = Expr::parse(&src).is_ok();
        prop_assert_eq!(ours, reference::accepts(&src), "{:?}", src);
        if ours {
            prop_assert_eq!(Expr::parse(&src).unwrap().to_string(), Expr::parse(&src).unwrap().to_string());
        }
    }
}

/// Independent recognizer for the expression grammar.
mod reference {
    #[derive(Debug, PartialEq)]
    enum Tok {
        Num,
        Var,
        Func,
        Op(char),
        Open,
        Close,
    }

    fn lex(s: &str) -> Option<Vec<Tok>> {
        let c: Vec<char> = s.chars().collect();
        let mut i = 0;
        let mut out = Vec::new();
        while i < c.len() {
            let ch = c[i];
            if ch.is_whitespace() {
                i += 1;
            } else if "+-*/".contains(ch) {
                out.push(Tok::Op(ch));
                i += 1;
            } else if ch == '(' {
                out.push(Tok::Open);
                i += 1;
            } else if ch == ')' {
                out.push(Tok::Close);
                i += 1;
            } else if ch.is_ascii_digit() || ch == '.' {
                let start = i;
                while i < c.len() && (c[i].is_ascii_digit() || c[i] == '.') {
                    i += 1;
                }
                if i < c.len() && (c[i] == 'e' || c[i] == 'E') {
                    let mut j = i + 1;
                    if j < c.len() && (c[j] == '+' || c[j] == '-') {
                        j += 1;
                    }
                    if j < c.len() && c[j].is_ascii_digit() {
                        while j < c.len() && c[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text: String = c[start..i].iter().collect();
                text.parse::<f64>().ok()?;
                out.push(Tok::Num);
            } else if ch.is_ascii_alphabetic() || ch == '_' {
                let start = i;
                while i < c.len() && (c[i].is_ascii_alphanumeric() || c[i] == '_') {
                    i += 1;
                }
                let word: String = c[start..i].iter().collect();
                out.push(match word.as_str() {
                    "t" | "pi" => Tok::Var,
                    "sin" | "cos" | "exp" | "sqrt" => Tok::Func,
                    _ => return None,
                });
            } else {
                return None;
            }
        }
        Some(out)
    }

    struct P<'a> {
        t: &'a [Tok],
        i: usize,
    }

    impl P<'_> {
        fn peek(&self) -> Option<&Tok> {
            self.t.get(self.i)
        }
        fn expr(&mut self) -> bool {
            if !self.term() {
                return false;
            }
            while matches!(self.peek(), Some(Tok::Op('+' | '-'))) {
                self.i += 1;
                if !self.term() {
                    return false;
                }
            }
            true
        }
        fn term(&mut self) -> bool {
            if !self.factor() {
                return false;
            }
            while matches!(self.peek(), Some(Tok::Op('*' | '/'))) {
                self.i += 1;
                if !self.factor() {
                    return false;
                }
            }
            true
        }
        fn factor(&mut self) -> bool {
            if self.peek() == Some(&Tok::Op('-')) {
                self.i += 1;
            }
            self.atom()
        }
        fn atom(&mut self) -> bool {
            match self.peek() {
                Some(Tok::Num | Tok::Var) => {
                    self.i += 1;
                    true
                }
                Some(Tok::Func) => {
                    self.i += 1;
                    self.group()
                }
                Some(Tok::Open) => self.group(),
                _ => false,
            }
        }
        fn group(&mut self) -> bool {
            if self.peek() != Some(&Tok::Open) {
                return false;
            }
            self.i += 1;
            if !self.expr() || self.peek() != Some(&Tok::Close) {
                return false;
            }
            self.i += 1;
            true
        }
    }

    pub fn accepts(s: &str) -> bool {
        let Some(toks) = lex(s) else { return false };
        let mut p = P { t: &toks, i: 0 };
        p.expr() && p.i == toks.len()
    }
}
