//! Parameter-free group shuffle of two same-width channel stacks.
//!
//! Both modality feature maps carry `C` channels split into `K` groups of
//! `N = C/K`; the output interleaves the groups modality-by-modality, so
//! channel `j` of the visible map lands at `j mod N + floor(j/N) * 2N` and the
//! thermal map at the same position offset by `N`. `K = 1` degenerates to
//! plain concatenation and `K = C` to per-channel interleaving.

use ndarray::{Array4, Axis};

use crate::error::{Error, Result};
use crate::nn::Float;

/// Which of the two input stacks a channel comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visible,
    Thermal,
}

/// Channel count / group count pair defining the permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleSpec {
    channels_per_modality: usize,
    groups: usize,
}

impl ShuffleSpec {
    pub fn new(channels_per_modality: usize, groups: usize) -> Result<Self> {
        if channels_per_modality == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        if groups == 0 || groups > channels_per_modality {
            return Err(Error::Config(format!(
                "group count {groups} must lie in [1, {channels_per_modality}]"
            )));
        }
        if channels_per_modality % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} does not divide channel count {channels_per_modality}"
            )));
        }
        Ok(ShuffleSpec {
            channels_per_modality,
            groups,
        })
    }

    pub fn channels_per_modality(&self) -> usize {
        self.channels_per_modality
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_size(&self) -> usize {
        self.channels_per_modality / self.groups
    }

    /// Output position in `[0, 2C)` for input channel `j` of one modality.
    pub fn shuffle_index(&self, j: usize, modality: Modality) -> Result<usize> {
        let c = self.channels_per_modality;
        if j >= c {
            return Err(Error::Bounds(format!("channel index {j} out of [0, {c})")));
        }
        let n = self.group_size();
        let base = j % n + (j / n) * 2 * n;
        Ok(match modality {
            Modality::Visible => base,
            Modality::Thermal => base + n,
        })
    }

    /// `perm[out_channel] = (modality, in_channel)`; a bijection onto `[0, 2C)`.
    pub fn inverse_map(&self) -> Vec<(Modality, usize)> {
        let c = self.channels_per_modality;
        let mut map = vec![(Modality::Visible, 0usize); 2 * c];
        for j in 0..c {
            map[self.shuffle_index(j, Modality::Visible).unwrap()] = (Modality::Visible, j);
            map[self.shuffle_index(j, Modality::Thermal).unwrap()] = (Modality::Thermal, j);
        }
        map
    }
}

fn check_pair_shapes<F: Float>(f_v: &Array4<F>, f_t: &Array4<F>, spec: &ShuffleSpec) -> Result<()> {
    if f_v.dim() != f_t.dim() {
        return Err(Error::Shape(format!(
            "modality shapes differ: {:?} vs {:?}",
            f_v.dim(),
            f_t.dim()
        )));
    }
    if f_v.dim().1 != spec.channels_per_modality {
        return Err(Error::Shape(format!(
            "input has {} channels, spec expects {}",
            f_v.dim().1,
            spec.channels_per_modality
        )));
    }
    Ok(())
}

/// Interleaves the two stacks into `(B, 2C, H, W)` per the spec permutation.
///
/// Pure channel gather: every activation value is moved, never changed.
pub fn group_shuffle<F: Float>(
    f_v: &Array4<F>,
    f_t: &Array4<F>,
    spec: &ShuffleSpec,
) -> Result<Array4<F>> {
    check_pair_shapes(f_v, f_t, spec)?;
    let (b, c, h, w) = f_v.dim();
    let mut out = Array4::zeros((b, 2 * c, h, w));
    for (oc, &(m, j)) in spec.inverse_map().iter().enumerate() {
        let src = match m {
            Modality::Visible => f_v.index_axis(Axis(1), j),
            Modality::Thermal => f_t.index_axis(Axis(1), j),
        };
        out.index_axis_mut(Axis(1), oc).assign(&src);
    }
    Ok(out)
}

/// Exact inverse of [`group_shuffle`].
pub fn group_unshuffle<F: Float>(
    f_s: &Array4<F>,
    spec: &ShuffleSpec,
) -> Result<(Array4<F>, Array4<F>)> {
    let (b, c2, h, w) = f_s.dim();
    if c2 % 2 != 0 || c2 / 2 != spec.channels_per_modality {
        return Err(Error::Shape(format!(
            "shuffled input has {c2} channels, expected {}",
            2 * spec.channels_per_modality
        )));
    }
    let c = c2 / 2;
    let mut f_v = Array4::zeros((b, c, h, w));
    let mut f_t = Array4::zeros((b, c, h, w));
    for (oc, &(m, j)) in spec.inverse_map().iter().enumerate() {
        let src = f_s.index_axis(Axis(1), oc);
        match m {
            Modality::Visible => f_v.index_axis_mut(Axis(1), j).assign(&src),
            Modality::Thermal => f_t.index_axis_mut(Axis(1), j).assign(&src),
        }
    }
    Ok((f_v, f_t))
}

/// Gradient of [`group_shuffle`]: route the upstream gradient through the
/// inverse permutation. Identical math to `group_unshuffle`.
pub fn group_shuffle_backward<F: Float>(
    gy: &Array4<F>,
    spec: &ShuffleSpec,
) -> Result<(Array4<F>, Array4<F>)> {
    group_unshuffle(gy, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(shape, || rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn hand_evaluated_indices() {
        let spec = ShuffleSpec::new(4, 2).unwrap();
        assert_eq!(spec.shuffle_index(2, Modality::Visible).unwrap(), 4);
        assert_eq!(spec.shuffle_index(0, Modality::Thermal).unwrap(), 2);

        let k1 = ShuffleSpec::new(8, 1).unwrap();
        assert_eq!(k1.shuffle_index(5, Modality::Visible).unwrap(), 5);

        let kc = ShuffleSpec::new(8, 8).unwrap();
        assert_eq!(kc.shuffle_index(3, Modality::Visible).unwrap(), 6);
        assert_eq!(kc.shuffle_index(3, Modality::Thermal).unwrap(), 7);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(ShuffleSpec::new(8, 3), Err(Error::Config(_))));
        assert!(matches!(ShuffleSpec::new(8, 0), Err(Error::Config(_))));
        assert!(matches!(ShuffleSpec::new(8, 9), Err(Error::Config(_))));
        assert!(matches!(ShuffleSpec::new(0, 1), Err(Error::Config(_))));
        let spec = ShuffleSpec::new(8, 2).unwrap();
        assert!(matches!(
            spec.shuffle_index(8, Modality::Visible),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn c4_k2_channel_order() {
        // expected layout: [v0, v1, t0, t1, v2, v3, t2, t3]
        let spec = ShuffleSpec::new(4, 2).unwrap();
        let f_v = Array::from_shape_fn((1, 4, 1, 1), |(_, c, _, _)| c as f64);
        let f_t = Array::from_shape_fn((1, 4, 1, 1), |(_, c, _, _)| 10.0 + c as f64);
        let s = group_shuffle(&f_v, &f_t, &spec).unwrap();
        let got: Vec<f64> = (0..8).map(|c| s[[0, c, 0, 0]]).collect();
        assert_eq!(got, vec![0.0, 1.0, 10.0, 11.0, 2.0, 3.0, 12.0, 13.0]);
    }

    #[test]
    fn k1_equals_concatenation() {
        let spec = ShuffleSpec::new(6, 1).unwrap();
        let f_v = rand4(1, (2, 6, 3, 3));
        let f_t = rand4(2, (2, 6, 3, 3));
        let s = group_shuffle(&f_v, &f_t, &spec).unwrap();
        let cat = crate::nn::ops::concat_channels(&f_v, &f_t);
        assert_eq!(s, cat);
    }

    #[test]
    fn k_eq_c_is_strict_interleaving() {
        let c = 5;
        let spec = ShuffleSpec::new(c, c).unwrap();
        let f_v = rand4(3, (1, c, 2, 2));
        let f_t = rand4(4, (1, c, 2, 2));
        let s = group_shuffle(&f_v, &f_t, &spec).unwrap();
        for j in 0..c {
            assert_eq!(s.index_axis(Axis(1), 2 * j), f_v.index_axis(Axis(1), j));
            assert_eq!(s.index_axis(Axis(1), 2 * j + 1), f_t.index_axis(Axis(1), j));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = ShuffleSpec::new(4, 2).unwrap();
        let f_v = rand4(5, (1, 4, 3, 3));
        let f_t = rand4(6, (1, 4, 3, 4));
        assert!(matches!(
            group_shuffle(&f_v, &f_t, &spec),
            Err(Error::Shape(_))
        ));
        let odd = rand4(7, (1, 5, 2, 2));
        assert!(matches!(group_unshuffle(&odd, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let spec = ShuffleSpec::new(64, 16).unwrap();
        let f_v = rand4(8, (2, 64, 4, 4));
        let f_t = rand4(9, (2, 64, 4, 4));
        let s = group_shuffle(&f_v, &f_t, &spec).unwrap();
        let (rv, rt) = group_unshuffle(&s, &spec).unwrap();
        assert_eq!(rv, f_v);
        assert_eq!(rt, f_t);
    }

    #[test]
    fn gradient_is_inverse_permutation() {
        // finite differences on L = sum(seed ⊙ shuffle(v, t))
        let spec = ShuffleSpec::new(6, 3).unwrap();
        let f_v = rand4(10, (1, 6, 2, 2));
        let f_t = rand4(11, (1, 6, 2, 2));
        let seed = rand4(12, (1, 12, 2, 2));
        let (gv, gt) = group_shuffle_backward(&seed, &spec).unwrap();
        let h = 1e-6;
        let loss = |v: &Array4<f64>, t: &Array4<f64>| -> f64 {
            group_shuffle(v, t, &spec)
                .unwrap()
                .iter()
                .zip(seed.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        for idx in 0..f_v.len() {
            let mut vp = f_v.clone();
            vp.as_slice_mut().unwrap()[idx] += h;
            let mut vm = f_v.clone();
            vm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&vp, &f_t) - loss(&vm, &f_t)) / (2.0 * h);
            let a = gv.as_slice().unwrap()[idx];
            assert!(
                (fd - a).abs() / (fd.abs() + a.abs()).max(1e-6) < 1e-6,
                "visible grad mismatch at {idx}: fd={fd} analytic={a}"
            );
        }
        for idx in 0..f_t.len() {
            let mut tp = f_t.clone();
            tp.as_slice_mut().unwrap()[idx] += h;
            let mut tm = f_t.clone();
            tm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&f_v, &tp) - loss(&f_v, &tm)) / (2.0 * h);
            let a = gt.as_slice().unwrap()[idx];
            assert!((fd - a).abs() / (fd.abs() + a.abs()).max(1e-6) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn index_map_is_bijection(c in 1usize..64, kdiv in 0usize..6) {
            let divisors: Vec<usize> = (1..=c).filter(|k| c % k == 0).collect();
            let k = divisors[kdiv % divisors.len()];
            let spec = ShuffleSpec::new(c, k).unwrap();
            let mut seen = vec![false; 2 * c];
            for j in 0..c {
                for m in [Modality::Visible, Modality::Thermal] {
                    let o = spec.shuffle_index(j, m).unwrap();
                    prop_assert!(o < 2 * c);
                    prop_assert!(!seen[o], "duplicate output index {o}");
                    seen[o] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn shuffle_preserves_values_and_round_trips(
            c in 1usize..20,
            kdiv in 0usize..6,
            seed in 0u64..1000,
        ) {
            let divisors: Vec<usize> = (1..=c).filter(|k| c % k == 0).collect();
            let k = divisors[kdiv % divisors.len()];
            let spec = ShuffleSpec::new(c, k).unwrap();
            let f_v = rand4(seed, (1, c, 2, 3));
            let f_t = rand4(seed + 1, (1, c, 2, 3));
            let s = group_shuffle(&f_v, &f_t, &spec).unwrap();

            // pure permutation: multiset of values is unchanged
            let mut before: Vec<f64> = f_v.iter().chain(f_t.iter()).copied().collect();
            let mut after: Vec<f64> = s.iter().copied().collect();
            before.sort_by(f64::total_cmp);
            after.sort_by(f64::total_cmp);
            prop_assert_eq!(before, after);

            let (rv, rt) = group_unshuffle(&s, &spec).unwrap();
            prop_assert_eq!(rv, f_v);
            prop_assert_eq!(rt, f_t);
        }
    }
}
