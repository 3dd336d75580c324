/// Formats a float with 17 significant digits so it parses back bit-exactly.
pub fn float17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::float17;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let back: f64 = float17(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
