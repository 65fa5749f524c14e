//! Shared formatting for text artifacts. Floats are written with 17
//! significant digits so every value round-trips exactly.

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn join_f64(values: &[f64], sep: &str) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(sep)
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn floats_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
