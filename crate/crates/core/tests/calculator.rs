mod common;

use arbor_core::tools::{calc_eval, parse_expr, CalcError};
use common::expr::*;
use common::rng;
use proptest::prelude::*;

#[test]
fn fixed_cases() {
    assert_eq!(calc_eval("2+3*4"), Ok(14.0));
    assert_eq!(calc_eval("2^3^2"), Ok(512.0));
    assert_eq!(calc_eval("1/0"), Err(CalcError::DivisionByZero));
    assert_eq!(calc_eval("-2^2"), Ok(4.0));
}

#[test]
fn ten_thousand_random_trees_agree_with_the_reference() {
    let mut r = rng(2024);
    let mut finite = 0;
    for _ in 0..10_000 {
        let e = random_expr(&mut r, 5);
        let want = reference_eval(&e);
        for text in [e.to_string(), print_minimal(&e)] {
            match (calc_eval(&text), want) {
                (Ok(got), Some(w)) => assert!(close(got, w, 1e-12), "{text}: {got} vs {w}"),
                (Err(CalcError::DivisionByZero | CalcError::Overflow), None) => {}
                other => panic!("{text}: {other:?}"),
            }
        }
        finite += usize::from(want.is_some());
    }
    // the generator must mostly produce evaluable trees to mean anything
    assert!(finite > 8_000, "{finite}");
}

proptest! {
    #[test]
    fn printing_then_parsing_rebuilds_the_tree(seed in any::<u64>()) {
        let e = random_expr(&mut rng(seed), 6);
        prop_assert_eq!(parse_expr(&e.to_string()).unwrap(), e.clone());
        prop_assert_eq!(parse_expr(&print_minimal(&e)).unwrap(), e);
    }

    #[test]
    fn arbitrary_text_never_panics(text in "[0-9+*/^() .eE-]{0,24}") {
        let _ = calc_eval(&text);
    }
}
