use super::config::FfnSharing;
use crate::error::{Error, Result};

/// Maps each of `layers` layers to a physical FFN index.
///
/// * `Individual`: layer `i` gets its own FFN `i`.
/// * `SharedAll`: every layer uses FFN 0 (a cycle of length 1).
/// * `Sequence(M)`: block pattern, `m = ⌊(i-1) / (N/M)⌋` for layer `i` (1-based).
/// * `Cycle(M)`: checkerboard pattern, `m = (i-1) mod M`.
/// * `CycleRev(M)`: palindrome: `0..M` then `M-1..=0`; needs `M = N/2`.
///
/// `NoOp` has no assignment and is rejected here.
pub fn resolve_ffn_assignment(strategy: FfnSharing, layers: usize) -> Result<Vec<usize>> {
    let n = layers;
    let check_divides = |m: usize| -> Result<()> {
        if m == 0 || m > n || !n.is_multiple_of(m) {
            return Err(Error::config(format!(
                "{strategy} needs M dividing N, got M={m}, N={n}"
            )));
        }
        Ok(())
    };
    match strategy {
        FfnSharing::Individual => Ok((0..n).collect()),
        FfnSharing::SharedAll => Ok(vec![0; n]),
        FfnSharing::Sequence(m) => {
            check_divides(m)?;
            let block = n / m;
            Ok((1..=n).map(|i| (i - 1) / block).collect())
        }
        FfnSharing::Cycle(m) => {
            check_divides(m)?;
            Ok((1..=n).map(|i| (i - 1) % m).collect())
        }
        FfnSharing::CycleRev(m) => {
            if !n.is_multiple_of(2) || m != n / 2 || m == 0 {
                return Err(Error::config(format!(
                    "{strategy} needs an even N and M = N/2, got M={m}, N={n}"
                )));
            }
            Ok((1..=n).map(|i| if i <= m { i - 1 } else { n - i }).collect())
        }
        FfnSharing::NoOp => Err(Error::config("a no-op FFN has no layer assignment")),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn block_checkerboard_palindrome() {
        use FfnSharing::*;
        assert_eq!(resolve_ffn_assignment(Sequence(3), 6).unwrap(), [0, 0, 1, 1, 2, 2]);
        assert_eq!(resolve_ffn_assignment(Sequence(2), 6).unwrap(), [0, 0, 0, 1, 1, 1]);
        assert_eq!(resolve_ffn_assignment(Sequence(1), 6).unwrap(), [0; 6]);
        assert_eq!(resolve_ffn_assignment(Cycle(3), 6).unwrap(), [0, 1, 2, 0, 1, 2]);
        assert_eq!(resolve_ffn_assignment(Cycle(2), 6).unwrap(), [0, 1, 0, 1, 0, 1]);
        assert_eq!(resolve_ffn_assignment(Cycle(1), 6).unwrap(), [0; 6]);
        assert_eq!(resolve_ffn_assignment(CycleRev(3), 6).unwrap(), [0, 1, 2, 2, 1, 0]);
        assert_eq!(resolve_ffn_assignment(Individual, 6).unwrap(), [0, 1, 2, 3, 4, 5]);
        assert_eq!(
            resolve_ffn_assignment(SharedAll, 6).unwrap(),
            resolve_ffn_assignment(Cycle(1), 6).unwrap()
        );
    }

    #[test]
    fn rejects_non_dividing_counts() {
        use FfnSharing::*;
        assert!(resolve_ffn_assignment(Sequence(4), 6).is_err());
        assert!(resolve_ffn_assignment(Cycle(0), 6).is_err());
        assert!(resolve_ffn_assignment(Cycle(7), 6).is_err());
        assert!(resolve_ffn_assignment(CycleRev(2), 6).is_err());
        assert!(resolve_ffn_assignment(CycleRev(2), 5).is_err());
        assert!(resolve_ffn_assignment(NoOp, 6).is_err());
    }

    proptest! {
        #[test]
        fn distinct_count_is_m((n, m) in (1usize..25).prop_flat_map(|n| {
            let divisors: Vec<usize> = (1..=n).filter(|m| n % m == 0).collect();
            (Just(n), prop::sample::select(divisors))
        })) {
            for s in [FfnSharing::Sequence(m), FfnSharing::Cycle(m)] {
                let a = resolve_ffn_assignment(s, n).unwrap();
                prop_assert_eq!(a.len(), n);
                let distinct: BTreeSet<_> = a.iter().collect();
                prop_assert_eq!(distinct.len(), m);
                prop_assert!(a.iter().all(|&x| x < m));
            }
            if n % 2 == 0 {
                let a = resolve_ffn_assignment(FfnSharing::CycleRev(n / 2), n).unwrap();
                let rev: Vec<_> = a.iter().rev().cloned().collect();
                prop_assert_eq!(&a, &rev);
                let distinct: BTreeSet<_> = a.iter().collect();
                prop_assert_eq!(distinct.len(), n / 2);
            }
        }
    }
}
