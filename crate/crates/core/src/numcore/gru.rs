use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter handles of one GRU cell. Row-vector convention: inputs are
/// `rows x d_in`, states `rows x d_h`, and every row is an independent
/// sequence sharing these weights.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_xr: ParamId,
    pub w_xz: ParamId,
    pub w_xn: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_n: ParamId,
}

impl GruParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut mat = |s: &mut ParamStore, n: &str, r, c| s.add_xavier(format!("{prefix}.{n}"), r, c, rng);
        let w_xr = mat(store, "w_xr", d_in, d_h)?;
        let w_xz = mat(store, "w_xz", d_in, d_h)?;
        let w_xn = mat(store, "w_xn", d_in, d_h)?;
        let w_hr = mat(store, "w_hr", d_h, d_h)?;
        let w_hz = mat(store, "w_hz", d_h, d_h)?;
        let w_hn = mat(store, "w_hn", d_h, d_h)?;
        let b_r = store.add(format!("{prefix}.b_r"), Tensor::zeros(1, d_h))?;
        let b_z = store.add(format!("{prefix}.b_z"), Tensor::zeros(1, d_h))?;
        let b_n = store.add(format!("{prefix}.b_n"), Tensor::zeros(1, d_h))?;
        Ok(GruParams {
            d_in,
            d_h,
            w_xr,
            w_xz,
            w_xn,
            w_hr,
            w_hz,
            w_hn,
            b_r,
            b_z,
            b_n,
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_xr, self.w_xz, self.w_xn, self.w_hr, self.w_hz, self.w_hn, self.b_r, self.b_z,
            self.b_n,
        ]
    }
}

/// One GRU step:
///
/// ```text
/// r  = σ(x W_xr + h W_hr + b_r)
/// z  = σ(x W_xz + h W_hz + b_z)
/// n  = tanh(x W_xn + (r ⊙ h) W_hn + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell(tape: &mut Tape, store: &ParamStore, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let (xv, hv) = (tape.value(x), tape.value(h));
    if xv.cols() != p.d_in || hv.cols() != p.d_h || xv.rows() != hv.rows() {
        return Err(Error::shape(
            "gru_cell",
            format!(
                "x {:?}, h {:?} for d_in {}, d_h {}",
                xv.shape(),
                hv.shape(),
                p.d_in,
                p.d_h
            ),
        ));
    }
    let gate = |tape: &mut Tape, wx: ParamId, hin: Var, wh: ParamId, b: ParamId| -> Result<Var> {
        let wx = tape.param(store, wx);
        let wh = tape.param(store, wh);
        let b = tape.param(store, b);
        let xa = tape.matmul(x, wx)?;
        let ha = tape.matmul(hin, wh)?;
        let s = tape.add(xa, ha)?;
        tape.add_row(s, b)
    };
    let r_pre = gate(tape, p.w_xr, h, p.w_hr, p.b_r)?;
    let r = tape.sigmoid(r_pre)?;
    let z_pre = gate(tape, p.w_xz, h, p.w_hz, p.b_z)?;
    let z = tape.sigmoid(z_pre)?;
    let rh = tape.mul(r, h)?;
    let n_pre = gate(tape, p.w_xn, rh, p.w_hn, p.b_n)?;
    let n = tape.tanh(n_pre)?;
    let one_minus_z = tape.affine(z, -1.0, 1.0)?;
    let keep_new = tape.mul(one_minus_z, n)?;
    let keep_old = tape.mul(z, h)?;
    tape.add(keep_new, keep_old)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tape::sigmoid;
    use crate::numcore::{grad_check, Coords};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_in: usize, d_h: usize, seed: u64) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GruParams::init(&mut store, "gru", d_in, d_h, &mut rng).unwrap();
        (store, p)
    }

    fn run(store: &ParamStore, p: &GruParams, x: Tensor, h: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(x).unwrap();
        let h = tape.constant(h).unwrap();
        let out = gru_cell(&mut tape, store, p, x, h).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zeros_stay_zero() {
        let (mut store, p) = setup(1, 3, 0);
        for id in p.ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let out = run(&store, &p, Tensor::zeros(2, 1), Tensor::zeros(2, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let (mut store, p) = setup(1, 2, 1);
        store.value_mut(p.b_z).data_mut().fill(800.0);
        let h = Tensor::from_rows(&[vec![0.25, -0.7]]).unwrap();
        let out = run(&store, &p, Tensor::scalar(0.4), h.clone());
        assert_eq!(out, h);
    }

    #[test]
    fn matches_scalar_hand_evaluation() {
        let (store, p) = setup(1, 2, 7);
        let x = 0.37;
        let h = [0.2, -0.55];
        let w = |id: ParamId| store.value(id).clone();
        // h' computed scalar by scalar from the three gate equations.
        let mut expected = [0.0; 2];
        for j in 0..2 {
            let r_j = |k: usize| {
                let mut s = x * w(p.w_xr).get(0, k) + w(p.b_r).get(0, k);
                for i in 0..2 {
                    s += h[i] * w(p.w_hr).get(i, k);
                }
                sigmoid(s)
            };
            let mut z = x * w(p.w_xz).get(0, j) + w(p.b_z).get(0, j);
            for i in 0..2 {
                z += h[i] * w(p.w_hz).get(i, j);
            }
            let z = sigmoid(z);
            let mut n = x * w(p.w_xn).get(0, j) + w(p.b_n).get(0, j);
            for i in 0..2 {
                n += r_j(i) * h[i] * w(p.w_hn).get(i, j);
            }
            let n = n.tanh();
            expected[j] = (1.0 - z) * n + z * h[j];
        }
        let out = run(&store, &p, Tensor::scalar(x), Tensor::row_vector(h.to_vec()));
        for j in 0..2 {
            assert!((out.data()[j] - expected[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn output_bounded_with_zero_bias() {
        let (store, p) = setup(1, 4, 3);
        let out = run(
            &store,
            &p,
            Tensor::column(vec![5.0, -3.0]),
            Tensor::from_rows(&[vec![0.9, -0.9, 0.1, 0.0], vec![-0.99, 0.5, 0.3, 0.2]]).unwrap(),
        );
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let (store, p) = setup(1, 3, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2)).unwrap();
        let h = tape.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(gru_cell(&mut tape, &store, &p, x, h).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, p) = setup(1, 3, 11);
        for id in [p.b_r, p.b_z, p.b_n] {
            store.value_mut(id).data_mut().copy_from_slice(&[0.1, -0.2, 0.05]);
        }
        let x = Tensor::column(vec![0.3, -1.1]);
        let h = Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![0.5, -0.4, 0.0]]).unwrap();
        let report = grad_check(
            &mut store,
            |s, tape| {
                let xv = tape.constant(x.clone())?;
                let hv = tape.constant(h.clone())?;
                let h1 = gru_cell(tape, s, &p, xv, hv)?;
                let h2 = gru_cell(tape, s, &p, xv, h1)?;
                let sq = tape.mul(h2, h2)?;
                tape.sum_all(sq)
            },
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
