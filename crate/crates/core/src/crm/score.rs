use std::cmp::Ordering;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

/// Placement score. Infinite values absorb finite ones; `-INFINITY` wins
/// over `+INFINITY` so a hard ban always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Score {
    MinusInfinity,
    Finite(i64),
    PlusInfinity,
}

impl Score {
    pub const ZERO: Score = Score::Finite(0);

    /// `self` applied `n` times (e.g. failure stickiness per fail count).
    pub fn times(self, n: u32) -> Score {
        match self {
            _ if n == 0 => Score::ZERO,
            Score::Finite(v) => Score::Finite(v.saturating_mul(i64::from(n))),
            inf => inf,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Score::Finite(_))
    }
}

impl Default for Score {
    fn default() -> Self {
        Score::ZERO
    }
}

impl Add for Score {
    type Output = Score;

    fn add(self, rhs: Score) -> Score {
        match (self, rhs) {
            (Score::MinusInfinity, _) | (_, Score::MinusInfinity) => Score::MinusInfinity,
            (Score::PlusInfinity, _) | (_, Score::PlusInfinity) => Score::PlusInfinity,
            (Score::Finite(a), Score::Finite(b)) => Score::Finite(a.saturating_add(b)),
        }
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        fn rank(s: &Score) -> (i8, i64) {
            match *s {
                Score::MinusInfinity => (0, 0),
                Score::Finite(v) => (1, v),
                Score::PlusInfinity => (2, 0),
            }
        }
        rank(self).cmp(&rank(other))
    }
}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::MinusInfinity => f.write_str("-INFINITY"),
            Score::Finite(v) => write!(f, "{v}"),
            Score::PlusInfinity => f.write_str("INFINITY"),
        }
    }
}

impl FromStr for Score {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "INFINITY" | "+INFINITY" | "infinity" | "+infinity" => Ok(Score::PlusInfinity),
            "-INFINITY" | "-infinity" => Ok(Score::MinusInfinity),
            other => other.parse::<i64>().map(Score::Finite).map_err(|_| format!("bad score {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn any_score() -> impl Strategy<Value = Score> {
        prop_oneof![
            Just(Score::MinusInfinity),
            Just(Score::PlusInfinity),
            (-1_000_000i64..1_000_000).prop_map(Score::Finite),
        ]
    }

    #[test]
    fn infinities_absorb() {
        assert_eq!(Score::PlusInfinity + Score::MinusInfinity, Score::MinusInfinity);
        assert_eq!(Score::MinusInfinity + Score::PlusInfinity, Score::MinusInfinity);
        assert_eq!(Score::PlusInfinity + Score::Finite(-500), Score::PlusInfinity);
        assert!(Score::PlusInfinity > Score::Finite(100));
        assert!(Score::Finite(-500) > Score::MinusInfinity);
    }

    #[test]
    fn parse_and_print() {
        for s in ["INFINITY", "-INFINITY", "-500", "0", "200"] {
            assert_eq!(s.parse::<Score>().unwrap().to_string(), s);
        }
        assert!("lots".parse::<Score>().is_err());
    }

    #[test]
    fn times_scales_failures() {
        assert_eq!(Score::Finite(-500).times(3), Score::Finite(-1500));
        assert_eq!(Score::MinusInfinity.times(0), Score::ZERO);
        assert_eq!(Score::MinusInfinity.times(2), Score::MinusInfinity);
    }

    proptest! {
        #[test]
        fn addition_commutes(a in any_score(), b in any_score()) {
            prop_assert_eq!(a + b, b + a);
        }

        #[test]
        fn addition_associates(a in any_score(), b in any_score(), c in any_score()) {
            prop_assert_eq!((a + b) + c, a + (b + c));
        }

        #[test]
        fn finite_shift_is_monotone(a in any_score(), b in any_score(), k in -10_000i64..10_000) {
            if a <= b {
                prop_assert!(a + Score::Finite(k) <= b + Score::Finite(k));
            }
        }
    }
}
