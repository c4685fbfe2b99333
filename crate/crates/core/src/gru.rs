//! Gated recurrent unit recorded on a [`Tape`].
//!
//! ```text
//! r  = σ(W_r x + U_r h + b_r)
//! z  = σ(W_z x + U_z h + b_z)
//! n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IhanError, Result};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w_n: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u_n: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_n: ParamId,
}

impl GruParams {
    /// Registers GRU weights under `prefix`, uniform in `[-1/√h, 1/√h]`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Tensor::from_vec(rows, cols, data).expect("sized")
        };
        let (d, h) = (input_dim, hidden_dim);
        let w_r = uniform(h, d);
        let w_z = uniform(h, d);
        let w_n = uniform(h, d);
        let u_r = uniform(h, h);
        let u_z = uniform(h, h);
        let u_n = uniform(h, h);
        let b_r = uniform(h, 1);
        let b_z = uniform(h, 1);
        let b_n = uniform(h, 1);
        GruParams {
            input_dim,
            hidden_dim,
            w_r: store.add(format!("{prefix}.gru.w_r"), w_r),
            w_z: store.add(format!("{prefix}.gru.w_z"), w_z),
            w_n: store.add(format!("{prefix}.gru.w_n"), w_n),
            u_r: store.add(format!("{prefix}.gru.u_r"), u_r),
            u_z: store.add(format!("{prefix}.gru.u_z"), u_z),
            u_n: store.add(format!("{prefix}.gru.u_n"), u_n),
            b_r: store.add(format!("{prefix}.gru.b_r"), b_r),
            b_z: store.add(format!("{prefix}.gru.b_z"), b_z),
            b_n: store.add(format!("{prefix}.gru.b_n"), b_n),
        }
    }

    /// Re-binds GRU weights already present in `store` under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(&format!("{prefix}.gru.{name}"))
                .ok_or_else(|| IhanError::Checkpoint(format!("missing {prefix}.gru.{name}")))
        };
        let w_r = find("w_r")?;
        let u_r = find("u_r")?;
        let (hidden_dim, input_dim) = store.get(w_r).shape();
        Ok(GruParams {
            input_dim,
            hidden_dim,
            w_r,
            w_z: find("w_z")?,
            w_n: find("w_n")?,
            u_r,
            u_z: find("u_z")?,
            u_n: find("u_n")?,
            b_r: find("b_r")?,
            b_z: find("b_z")?,
            b_n: find("b_n")?,
        })
    }

    /// One recurrent step. `x` is d×1, `h_prev` is h×1.
    pub fn cell(&self, tape: &mut Tape<'_>, x: Var, h_prev: Var) -> Result<Var> {
        if tape.shape(x) != (self.input_dim, 1) {
            return Err(IhanError::dim("gru input", tape.shape(x), (self.input_dim, 1)));
        }
        if tape.shape(h_prev) != (self.hidden_dim, 1) {
            return Err(IhanError::dim(
                "gru hidden",
                tape.shape(h_prev),
                (self.hidden_dim, 1),
            ));
        }
        let r = self.gate(tape, self.w_r, self.u_r, self.b_r, x, h_prev)?;
        let r = tape.sigmoid(r);
        let z = self.gate(tape, self.w_z, self.u_z, self.b_z, x, h_prev)?;
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, h_prev)?;
        let n = self.gate(tape, self.w_n, self.u_n, self.b_n, x, rh)?;
        let n = tape.tanh(n);
        let keep = tape.one_minus(z);
        let fresh = tape.mul(keep, n)?;
        let carried = tape.mul(z, h_prev)?;
        tape.add(fresh, carried)
    }

    /// Runs the cell over `inputs` from a zero initial state, returning every hidden state.
    pub fn run(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        let mut h = tape.input(Tensor::zeros(self.hidden_dim, 1));
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.cell(tape, x, h)?;
            out.push(h);
        }
        Ok(out)
    }

    fn gate(
        &self,
        tape: &mut Tape<'_>,
        w: ParamId,
        u: ParamId,
        b: ParamId,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let w = tape.param(w);
        let u = tape.param(u);
        let b = tape.param(b);
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.w_z, self.w_n, self.u_r, self.u_z, self.u_n, self.b_r, self.b_z,
            self.b_n,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    // Plain nested-loop GRU step, independent of the tape.
    fn reference_step(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mv = |id: ParamId, v: &[f64], i: usize| -> f64 {
            let m = store.get(id);
            (0..m.cols()).map(|j| m.get(i, j) * v[j]).sum()
        };
        let hd = p.hidden_dim;
        let mut r = vec![0.0; hd];
        let mut z = vec![0.0; hd];
        for i in 0..hd {
            r[i] = scalar_sigmoid(mv(p.w_r, x, i) + mv(p.u_r, h, i) + store.get(p.b_r).data()[i]);
            z[i] = scalar_sigmoid(mv(p.w_z, x, i) + mv(p.u_z, h, i) + store.get(p.b_z).data()[i]);
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        (0..hd)
            .map(|i| {
                let n = (mv(p.w_n, x, i) + mv(p.u_n, &rh, i) + store.get(p.b_n).data()[i]).tanh();
                (1.0 - z[i]) * n + z[i] * h[i]
            })
            .collect()
    }

    #[test]
    fn zero_weights_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::init(&mut store, "t", 3, 4, &mut rng);
        for id in p.param_ids() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::column(vec![0.3, -1.0, 2.0]));
        let h0 = tape.input(Tensor::zeros(4, 1));
        let h1 = p.cell(&mut tape, x, h0).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.0; 4]);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let p = GruParams::init(&mut store, "t", 5, 3, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(Tensor::column(x.clone()))).collect();
        let hs = p.run(&mut tape, &vars).unwrap();
        let mut h = vec![0.0; 3];
        for (x, hv) in xs.iter().zip(&hs) {
            h = reference_step(&store, &p, x, &h);
            for (a, b) in tape.value(*hv).data().iter().zip(&h) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_step_equals_run_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = GruParams::init(&mut store, "t", 2, 2, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::column(vec![0.5, -0.5]));
        let h0 = tape.input(Tensor::zeros(2, 1));
        let a = p.cell(&mut tape, x, h0).unwrap();
        let b = p.run(&mut tape, &[x]).unwrap()[0];
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = GruParams::init(&mut store, "t", 2, 2, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(3, 1));
        let h0 = tape.input(Tensor::zeros(2, 1));
        assert!(matches!(
            p.cell(&mut tape, x, h0),
            Err(IhanError::Dimension { .. })
        ));
    }
}
