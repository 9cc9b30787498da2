//! Corruption, flow-matching and alignment objectives.

use gf_numerics::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Independent `U[0, 1]` timestep per frame.
pub fn sample_timesteps<R: Rng + ?Sized>(n_frames: usize, rng: &mut R) -> Vec<f64> {
    (0..n_frames).map(|_| rng.random::<f64>()).collect()
}

pub fn sample_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Tensor::from_vec(shape, data).expect("noise shape")
}

/// `x_t = (1 − t_i)·x + t_i·ε`, with `t_i` broadcast over frame `i` (leading axis).
pub fn corrupt<T: Real>(x: &Tensor<T>, t: &[f64], eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() || x.shape().first() != Some(&t.len()) {
        return Err(Error::invalid(format!(
            "corrupt: x {:?}, noise {:?}, {} timesteps",
            x.shape(),
            eps.shape(),
            t.len()
        )));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("timestep {bad} outside [0, 1]")));
    }
    let per = x.len() / t.len().max(1);
    let mut out = x.clone();
    for (i, ((o, &xv), &e)) in out.data_mut().iter_mut().zip(x.data()).zip(eps.data()).enumerate() {
        let ti = T::of(t[i / per]);
        *o = (T::ONE - ti) * xv + ti * e;
    }
    Ok(out)
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `mean((v − (ε − x))²)` over every element.
pub fn fm_loss<T: Real>(g: &mut Graph<T>, v_pred: Var, x: &Tensor<f32>, eps: &Tensor<f32>) -> Result<Var> {
    check_same("fm_loss", g.shape(v_pred), x.shape())?;
    check_same("fm_loss", x.shape(), eps.shape())?;
    let target = eps.zip_map(x, "fm_target", |e, xv| e - xv)?;
    let target = g.constant(target.cast());
    let d = g.sub(v_pred, target)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// `−mean cos(y, projected)` over all `(ℓ, n, p)`; `y` is a constant.
pub fn angular_loss<T: Real>(g: &mut Graph<T>, y: &Tensor<f32>, projected: Var, eps: f64) -> Result<Var> {
    check_same("angular_loss", y.shape(), g.shape(projected))?;
    let y = g.constant(y.cast());
    let cos = g.cosine_similarity_lastdim(y, projected, eps)?;
    let m = g.mean(cos)?;
    Ok(g.scale(m, -1.0)?)
}

/// Token-mean of the squared `L2` distance between D-vectors.
pub fn token_sq_distance<T: Real>(g: &mut Graph<T>, y: &Tensor<f32>, pred: Var, op: &str) -> Result<Var> {
    check_same(op, y.shape(), g.shape(pred))?;
    let tokens = (y.len() / y.last_dim().max(1)).max(1);
    let y = g.constant(y.cast());
    let d = g.sub(pred, y)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / tokens as f64)?)
}

/// `(1/LNP)·Σ‖ỹ − y‖²`.
pub fn scale_loss<T: Real>(g: &mut Graph<T>, y: &Tensor<f32>, y_tilde: Var) -> Result<Var> {
    token_sq_distance(g, y, y_tilde, "scale_loss")
}

/// Unnormalized regression of `y` from the projected features.
pub fn mse_alignment_loss<T: Real>(g: &mut Graph<T>, y: &Tensor<f32>, projected: Var) -> Result<Var> {
    token_sq_distance(g, y, projected, "mse_alignment_loss")
}

/// Mean Euclidean norm of the last-axis vectors.
pub fn mean_vector_norm(t: &Tensor<f32>) -> f64 {
    let d = t.last_dim().max(1);
    let rows = t.len() / d;
    let total: f64 = t
        .data()
        .chunks(d)
        .map(|c| c.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .sum();
    total / rows.max(1) as f64
}
