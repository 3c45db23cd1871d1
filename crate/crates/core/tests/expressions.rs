use canonmp::expr::{self, parse, Expr, Func, VarEnv};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth expressions in `x` and `y` that stay finite on `[-1, 1]²`.
fn smooth() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-200i32..200).prop_map(|k| Expr::Const(k as f64 / 100.0)),
        Just(expr::var("x")),
        Just(expr::var("y")),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| expr::add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| expr::sub(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| expr::mul(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                expr::div(a, expr::add(Expr::Const(2.0), expr::call(Func::Sin, vec![b])))
            }),
            (inner.clone(), 2u8..4).prop_map(|(a, k)| expr::pow(a, Expr::Const(k as f64))),
            inner.clone().prop_map(expr::neg),
            inner.clone().prop_map(|a| expr::call(Func::Sin, vec![a])),
            inner.clone().prop_map(|a| expr::call(Func::Cos, vec![a])),
            inner.clone().prop_map(|a| expr::call(Func::Tanh, vec![a])),
            inner.clone().prop_map(|a| expr::call(Func::Exp, vec![expr::call(Func::Tanh, vec![a])])),
            inner.prop_map(|a| {
                expr::call(Func::Log, vec![expr::add(Expr::Const(1.0), expr::pow(a, Expr::Const(2.0)))])
            }),
        ]
    })
}

fn env(x: f64, y: f64) -> VarEnv {
    [("x".to_string(), x), ("y".to_string(), y)].into()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn derivative_matches_central_difference(e in smooth(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dx = e.diff("x").unwrap();
        let dy = e.diff("y").unwrap();
        for _ in 0..100 {
            let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            for (d, shift) in [(&dx, (1.0, 0.0)), (&dy, (0.0, 1.0))] {
                let h = 1e-5;
                let plus = e.eval(&env(x + h * shift.0, y + h * shift.1)).unwrap();
                let minus = e.eval(&env(x - h * shift.0, y - h * shift.1)).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let exact = d.eval(&env(x, y)).unwrap();
                // relative, with unit floor for derivatives near zero
                let rel = (exact - fd).abs() / exact.abs().max(1.0);
                prop_assert!(rel <= 1e-5, "{} at ({}, {}): {} vs {}", e, x, y, exact, fd);
            }
        }
    }

    #[test]
    fn printing_round_trips(e in smooth()) {
        let text = e.to_string();
        let back = parse(&text).unwrap();
        prop_assert_eq!(back.to_string(), text.clone());
        for (x, y) in [(0.3, -0.7), (-0.9, 0.1), (0.5, 0.5)] {
            let (a, b) = (e.eval(&env(x, y)).unwrap(), back.eval(&env(x, y)).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{}: {} vs {}", text, a, b);
        }
    }
}

#[test]
fn nonsmooth_functions_are_rejected() {
    for text in ["abs(x)", "max(x, 0)", "min(x, y)"] {
        assert!(parse(text).unwrap().diff("x").is_err(), "{text}");
    }
}
