//! Stage one: point encoder Ψ, VAE encoder/decoder Θ, and SDF decoder Φ.
//!
//! A cloud `P` maps to `π = Ψ(P)`, then to `(μ, log σ²) = Θ_enc(π)`, a latent
//! `z = μ + σ ⊙ ε`, a decoded feature `π′ = Θ_dec(z)`, and finally signed
//! distances `Φ(x | π′)` for query points `x`.

use std::collections::BTreeMap;

use dsdf_geometry::{marching_cubes, lattice_points, Mesh, Point, PointCloud, ScalarGrid};
use dsdf_nn::{Activation, Linear, Mlp, ParamStore};
use dsdf_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ModulationConfig;
use crate::error::{CoreError, Result};
use crate::rng::{substream, Stream};

/// Queries evaluated per inference pass when sampling a lattice.
const EVAL_CHUNK: usize = 8192;

/// Per-point MLP followed by a max over points: `[S, N, 3] → [S, F]`.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub mlp: Mlp,
}

impl PointEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = Mlp::new(store, name, &[3, hidden, hidden, feature_dim], Activation::Relu, rng)?;
        Ok(Self { mlp })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, points: &Var) -> Result<Var> {
        let shape = points.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[1] == 0 {
            return Err(CoreError::Config(format!(
                "point encoder expects [shapes, points ≥ 1, 3], got {shape:?}"
            )));
        }
        let per_point = self.mlp.forward(tape, store, points)?;
        Ok(tape.max(&per_point, Some(1))?)
    }
}

/// `Φ(x | π′)`: an MLP on `concat(x, π′)`. The first layer's weight is split
/// into its `x` and `π′` columns so the feature part is computed once per
/// shape rather than once per query.
#[derive(Debug, Clone)]
pub struct SdfDecoder {
    pub first: Linear,
    pub rest: Mlp,
    pub feature_dim: usize,
}

impl SdfDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = Linear::new(store, &format!("{name}.in"), 3 + feature_dim, hidden, rng)?;
        let mut dims = vec![hidden; layers];
        dims.push(1);
        let rest = Mlp::new(store, &format!("{name}.h"), &dims, Activation::Gelu, rng)?;
        Ok(Self {
            first,
            rest,
            feature_dim,
        })
    }

    /// `x: [S, Q, 3]`, `feature: [S, F]` → `[S, Q]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, feature: &Var) -> Result<Var> {
        let (xs, fs) = (x.shape().to_vec(), feature.shape().to_vec());
        if xs.len() != 3 || xs[2] != 3 || fs.len() != 2 || fs[0] != xs[0] || fs[1] != self.feature_dim {
            return Err(CoreError::Config(format!(
                "SDF decoder expects x [S, Q, 3] and feature [S, {}], got {xs:?} and {fs:?}",
                self.feature_dim
            )));
        }
        let (s, q) = (xs[0], xs[1]);
        let hidden = self.first.out_dim;
        let w = store.bind(tape, self.first.weight);
        let wx = tape.transpose(&tape.slice(&w, 1, 0, 3)?)?;
        let wf = tape.transpose(&tape.slice(&w, 1, 3, self.feature_dim)?)?;
        let hx = tape.matmul(x, &wx)?;
        let mut hf = tape.matmul(feature, &wf)?;
        if let Some(b) = self.first.bias {
            hf = tape.add(&hf, &store.bind(tape, b))?;
        }
        let hf = tape.reshape(&hf, vec![s, 1, hidden])?;
        let h = tape.gelu(&tape.add(&hx, &hf)?)?;
        let out = self.rest.forward(tape, store, &h)?;
        Ok(tape.reshape(&out, vec![s, q])?)
    }
}

/// One training batch for the modulation loss.
#[derive(Debug, Clone)]
pub struct ModulationBatch {
    /// Encoder input `[S, N, 3]`.
    pub points: Tensor,
    /// Query points `[S, Q, 3]`.
    pub queries: Tensor,
    /// Ground-truth signed distances `[S, Q]`.
    pub sdf: Tensor,
    /// Reparameterization noise `[S, D]`; `None` uses `z = μ`.
    pub eps: Option<Tensor>,
}

/// Loss terms, all scalar vars on the tape.
#[derive(Debug, Clone)]
pub struct ModulationLoss {
    pub l1: Var,
    pub kl: Var,
    pub total: Var,
    pub mu: Var,
}

/// Ψ, Θ_enc, Θ_dec and Φ sharing one parameter store under the prefixes
/// `psi.`, `enc.`, `dec.` and `phi.`.
#[derive(Debug, Clone)]
pub struct ModulationModel {
    pub config: ModulationConfig,
    pub store: ParamStore,
    pub psi: PointEncoder,
    pub vae_enc: Mlp,
    pub vae_dec: Mlp,
    pub phi: SdfDecoder,
}

/// KL divergence from `N(μ, σ²)` to `N(0, prior_std²)`, summed over latent
/// dimensions and averaged over rows (a single row for rank-1 input).
pub fn kl_to_prior(tape: &Tape, mu: &Var, logvar: &Var, prior_std: f64) -> Result<Var> {
    if mu.shape() != logvar.shape() {
        return Err(CoreError::Config(format!(
            "KL: μ {:?} and log σ² {:?} differ in shape",
            mu.shape(),
            logvar.shape()
        )));
    }
    let s2 = prior_std * prior_std;
    // log(s/σ) + (σ² + μ²)/(2s²) − ½ with σ² = exp(logvar).
    let log_ratio = tape.add_scalar(&tape.scale(logvar, -0.5)?, prior_std.ln())?;
    let var = tape.exp(logvar)?;
    let mu2 = tape.mul(mu, mu)?;
    let quad = tape.scale(&tape.add(&var, &mu2)?, 1.0 / (2.0 * s2))?;
    let per_dim = tape.add_scalar(&tape.add(&log_ratio, &quad)?, -0.5)?;
    let rank = per_dim.shape().len();
    let summed = tape.sum(&per_dim, Some(rank - 1))?;
    Ok(tape.mean(&summed, None)?)
}

impl ModulationModel {
    /// Fresh Glorot-initialized model; weights depend only on `config` and `seed`.
    pub fn new(config: ModulationConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let (f, d, h) = (config.feature_dim, config.latent_dim, config.vae_hidden);
        let psi = PointEncoder::new(&mut store, "psi", config.point_hidden, f, &mut rng)?;
        let vae_enc = Mlp::new(&mut store, "enc", &[f, h, h, h, h, 2 * d], Activation::Gelu, &mut rng)?;
        let vae_dec = Mlp::new(&mut store, "dec", &[d, h, h, h, h, f], Activation::Gelu, &mut rng)?;
        let phi = SdfDecoder::new(&mut store, "phi", f, config.sdf_hidden, config.sdf_layers, &mut rng)?;
        Ok(Self {
            config,
            store,
            psi,
            vae_enc,
            vae_dec,
            phi,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// `π = Ψ(P)`.
    pub fn encode(&self, tape: &Tape, points: &Var) -> Result<Var> {
        self.psi.forward(tape, &self.store, points)
    }

    /// `(μ, log σ²) = Θ_enc(π)`.
    pub fn posterior(&self, tape: &Tape, feature: &Var) -> Result<(Var, Var)> {
        let h = self.vae_enc.forward(tape, &self.store, feature)?;
        let d = self.config.latent_dim;
        let axis = h.shape().len() - 1;
        Ok((tape.slice(&h, axis, 0, d)?, tape.slice(&h, axis, d, d)?))
    }

    /// `z = μ + exp(log σ² / 2) ⊙ ε`, or `μ` when `eps` is `None`.
    pub fn reparameterize(tape: &Tape, mu: &Var, logvar: &Var, eps: Option<&Tensor>) -> Result<Var> {
        match eps {
            None => Ok(mu.clone()),
            Some(eps) => {
                let std = tape.exp(&tape.scale(logvar, 0.5)?)?;
                let noise = tape.mul(&std, &tape.constant(eps.clone()))?;
                Ok(tape.add(mu, &noise)?)
            }
        }
    }

    /// `π′ = Θ_dec(z)`.
    pub fn decode(&self, tape: &Tape, z: &Var) -> Result<Var> {
        Ok(self.vae_dec.forward(tape, &self.store, z)?)
    }

    /// `Φ(x | π′)` for `x: [S, Q, 3]` and `feature: [S, F]`.
    pub fn sdf(&self, tape: &Tape, x: &Var, feature: &Var) -> Result<Var> {
        self.phi.forward(tape, &self.store, x, feature)
    }

    /// `mean |Φ(x | Θ_dec(z)) − SDF(x)| + β · KL`; there is no feature reconstruction term.
    pub fn loss(&self, tape: &Tape, batch: &ModulationBatch, kl_weight: f64) -> Result<ModulationLoss> {
        let points = tape.constant(batch.points.clone());
        let feature = self.encode(tape, &points)?;
        let (mu, logvar) = self.posterior(tape, &feature)?;
        let z = Self::reparameterize(tape, &mu, &logvar, batch.eps.as_ref())?;
        let decoded = self.decode(tape, &z)?;
        let l1 = self.sdf_l1(tape, &decoded, &batch.queries, &batch.sdf)?;
        let kl = kl_to_prior(tape, &mu, &logvar, self.config.prior_std)?;
        let total = tape.add(&l1, &tape.scale(&kl, kl_weight)?)?;
        Ok(ModulationLoss { l1, kl, total, mu })
    }

    /// `mean |Φ(x | feature) − SDF(x)|` over every query of every shape.
    pub fn sdf_l1(&self, tape: &Tape, feature: &Var, queries: &Tensor, sdf: &Tensor) -> Result<Var> {
        let pred = self.sdf(tape, &tape.constant(queries.clone()), feature)?;
        let diff = tape.sub(&pred, &tape.constant(sdf.clone()))?;
        Ok(tape.mean(&tape.abs(&diff)?, None)?)
    }

    /// Posterior means for a batch of equally sized clouds, without recording.
    pub fn latent_means(&self, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>> {
        if clouds.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::inference();
        let points = tape.constant(stack_clouds(clouds)?);
        let feature = self.encode(&tape, &points)?;
        let (mu, _) = self.posterior(&tape, &feature)?;
        Ok(mu
            .value()
            .data()
            .chunks(self.config.latent_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Decoded feature `π′` for a single latent.
    pub fn decode_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let tape = Tape::inference();
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        Ok(self.decode(&tape, &zv)?.value().data().to_vec())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(CoreError::Config(format!(
                "latent has {} entries, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// `Φ(p | Θ_dec(z))` at every point, evaluated in chunks without recording.
    pub fn sdf_values(&self, z: &[f64], points: &[Point]) -> Result<Vec<f64>> {
        let feature = self.decode_latent(z)?;
        self.sdf_values_for_feature(&feature, points)
    }

    pub fn sdf_values_for_feature(&self, feature: &[f64], points: &[Point]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let f = tape.constant(Tensor::new(vec![1, feature.len()], feature.to_vec())?);
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            let x = tape.constant(Tensor::new(vec![1, chunk.len(), 3], flat)?);
            out.extend_from_slice(self.sdf(&tape, &x, &f)?.value().data());
        }
        Ok(out)
    }

    /// Lattice of decoded signed distances over `[-1, 1]³`.
    pub fn sdf_grid(&self, z: &[f64], resolution: usize) -> Result<ScalarGrid> {
        let values = self.sdf_values(z, &lattice_points(resolution))?;
        Ok(ScalarGrid::new(resolution, values)?)
    }

    /// Marching cubes on the decoded field; an empty mesh means no zero crossing.
    pub fn reconstruct_mesh(&self, z: &[f64], resolution: usize) -> Result<Mesh> {
        Ok(marching_cubes(&self.sdf_grid(z, resolution)?, 0.0)?)
    }

    pub fn parameters(&self) -> BTreeMap<String, Tensor> {
        self.store.to_named()
    }

    pub fn load_parameters(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        Ok(self.store.load_named(named)?)
    }
}

/// Stacks equally sized clouds into `[S, N, 3]`.
pub fn stack_clouds(clouds: &[&PointCloud]) -> Result<Tensor> {
    let n = clouds.first().map(|c| c.len()).unwrap_or(0);
    if let Some(c) = clouds.iter().find(|c| c.len() != n) {
        return Err(CoreError::Config(format!(
            "clouds in one batch must share a size: {} vs {n}",
            c.len()
        )));
    }
    let flat: Vec<f64> = clouds.iter().flat_map(|c| c.flat()).collect();
    Ok(Tensor::new(vec![clouds.len(), n, 3], flat)?)
}

/// Standard normal noise of the given shape.
pub fn gaussian<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("normal samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModulationConfig {
        ModulationConfig {
            feature_dim: 8,
            latent_dim: 4,
            point_hidden: 8,
            vae_hidden: 8,
            sdf_hidden: 8,
            sdf_layers: 2,
            prior_std: 0.25,
        }
    }

    #[test]
    fn kl_closed_forms() {
        let tape = Tape::inference();
        let lv = (0.25f64).ln() * 2.0;
        let mu = tape.constant(Tensor::zeros(vec![2, 5]));
        let logvar = tape.constant(Tensor::full(vec![2, 5], lv).unwrap());
        assert!(kl_to_prior(&tape, &mu, &logvar, 0.25).unwrap().item().unwrap().abs() < 1e-15);
        let mu = tape.constant(Tensor::full(vec![2, 5], 0.25).unwrap());
        let kl = kl_to_prior(&tape, &mu, &logvar, 0.25).unwrap().item().unwrap();
        assert!((kl - 2.5).abs() < 1e-12);
    }

    #[test]
    fn model_shapes() {
        let m = ModulationModel::new(tiny(), 0).unwrap();
        let tape = Tape::inference();
        let pts = tape.constant(Tensor::full(vec![3, 10, 3], 0.1).unwrap());
        let f = m.encode(&tape, &pts).unwrap();
        assert_eq!(f.shape(), &[3, 8]);
        let (mu, lv) = m.posterior(&tape, &f).unwrap();
        assert_eq!(mu.shape(), &[3, 4]);
        assert_eq!(lv.shape(), &[3, 4]);
        let dec = m.decode(&tape, &mu).unwrap();
        let x = tape.constant(Tensor::zeros(vec![3, 7, 3]));
        assert_eq!(m.sdf(&tape, &x, &dec).unwrap().shape(), &[3, 7]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ModulationModel::new(tiny(), 5).unwrap();
        let b = ModulationModel::new(tiny(), 5).unwrap();
        let c = ModulationModel::new(tiny(), 6).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
    }
}
