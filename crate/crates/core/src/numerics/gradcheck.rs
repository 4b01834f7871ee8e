use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error.
    pub denominator_floor: f64,
    /// Check at most this many coordinates per parameter (sampled), or all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, denominator_floor: 1e-6, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares backpropagated gradients of the scalar built by `build` with
/// central finite differences over the parameters in `store`.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss, store)?;

    let mut rng = rng_from_seed(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, coords_checked: 0, worst: None };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + opts.step;
            let plus = eval(&mut build, store)?;
            store.value_mut(id).data_mut()[i] = original - opts.step;
            let minus = eval(&mut build, store)?;
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(opts.denominator_floor);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn eval<F>(build: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::inference();
    let v = build(&mut g, store)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{PickSpec, Tensor};
    use rand::SeedableRng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        s.add("b", Tensor::randn(&[4, 5], 1.0, &mut rng));
        s.add("c", Tensor::randn(&[1, 5], 1.0, &mut rng));
        s.add("d", Tensor::randn(&[3, 1], 1.0, &mut rng));
        s.add("e", Tensor::randn(&[2, 4], 1.0, &mut rng));
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.7]));
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let w = g.param(s, s.id("w").unwrap());
                let sq = g.mul(w, w);
                let t = g.sum_all(sq);
                Ok(g.scale(t, 0.5))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn dead_parameter_is_zero_on_both_sides() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![0.3, -1.2]));
        store.add("unused", Tensor::row_vector(vec![5.0, 6.0]));
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let w = g.param(s, s.id("w").unwrap());
                let sq = g.mul(w, w);
                Ok(g.sum_all(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.coords_checked, 4);
        assert!(report.max_rel_error < 1e-8);
    }

    /// Every differentiable op against central differences on random inputs.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = random_store(3);
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let p = |g: &mut Graph, n: &str| g.param(s, s.id(n).unwrap());
                let (a, b, c, d, e) = (p(g, "a"), p(g, "b"), p(g, "c"), p(g, "d"), p(g, "e"));
                let ab = g.matmul(a, b); // 3x5
                let ab = g.add_row(ab, c);
                let h = g.gelu(ab);
                let att = g.matmul_bt(a, e); // 3x2
                let keep = [true, false, true, true, true, true];
                let att = g.softmax_rows(att, Some(&keep));
                let sm = g.softmax_rows(h, None);
                let ones = g.constant(Tensor::filled(&[1, 5], 0.5));
                let gamma = g.add_row(c, ones);
                let gamma = g.sum_rows(gamma);
                let ln = g.layer_norm(h, gamma, c);
                let mix = g.mul(ln, sm);
                let mix = g.mul_col(mix, d);
                let sig = g.sigmoid(mix);
                let gathered = g.gather_rows(sig, &[2, 0, 2]);
                let left = g.slice_cols(gathered, 1, 3);
                let right = g.slice_cols(gathered, 0, 2);
                let cat = g.concat_cols(&[left, right]); // 3x5
                let scat = g.scatter_add_rows(h, cat, &[1, 1, 0]);
                let rows = g.concat_rows(&[scat, ab]); // 6x5
                let mean = g.mean_rows(rows);
                let ls = g.log_sigmoid(mean);
                let picked = g.pick_entries(att, &[(0, 1), (2, 0)]);
                let lp = g.log_prob_pick(
                    rows,
                    &[
                        PickSpec { row: 0, lo: 0, hi: 5, target: 3, weight: 1.0 },
                        PickSpec { row: 4, lo: 2, hi: 5, target: 2, weight: -0.5 },
                    ],
                );
                let bce = g.bce_with_logits(mean, &[1.0, 0.0, 0.3, 1.0, 0.0]);
                let s1 = g.sum_all(ls);
                let s2 = g.sum_all(picked);
                let t = g.add(s1, s2);
                let t = g.sub(t, lp);
                let t = g.add(t, bce);
                Ok(g.scale(t, 0.7))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
