//! Tape gradients of every loss against central differences on tiny models.

mod common;

use common::*;
use dsdf_core::modulation::kl_to_prior;
use dsdf_core::pipeline::{finetune_loss, FinetuneBatch};
use dsdf_core::{Conditioning, Denoiser, ModulationModel, Schedule};
use dsdf_nn::gradcheck::check_param_gradients;
use dsdf_nn::{NnError, ParamStore};
use dsdf_tensor::{finite_diff_check, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn nn<T>(r: dsdf_core::Result<T>) -> dsdf_nn::Result<T> {
    r.map_err(|e| NnError::Config(e.to_string()))
}

fn with_store(model: &ModulationModel, store: &ParamStore) -> ModulationModel {
    let mut m = model.clone();
    m.store = store.clone();
    m
}

fn with_den_store(den: &Denoiser, store: &ParamStore) -> Denoiser {
    let mut d = den.clone();
    d.store = store.clone();
    d
}

#[test]
fn modulation_loss_gradients() {
    let model = ModulationModel::new(tiny_modulation(), 3).unwrap();
    let batch = random_batch(2, 5, 6, 4, &mut rng(1));
    let err = check_param_gradients(
        &model.store,
        |tape, store| Ok(nn(with_store(&model, store).loss(tape, &batch, 0.3))?.total),
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "modulation loss relative error {err}");
}

#[test]
fn kl_gradients_in_mean_and_log_variance() {
    let mut r = rng(2);
    let x = uniform(&[3, 8], -1.0, 1.0, &mut r);
    let err = finite_diff_check(
        |tape, v| {
            let mu = tape.slice(v, 1, 0, 4)?;
            let lv = tape.slice(v, 1, 4, 4)?;
            kl_to_prior(tape, &mu, &lv, 0.25).map_err(|e| dsdf_tensor::TensorError::Domain {
                op: "kl",
                detail: e.to_string(),
            })
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "KL relative error {err}");
}

#[test]
fn sdf_gradient_in_query_position() {
    let model = ModulationModel::new(tiny_modulation(), 4).unwrap();
    let mut r = rng(3);
    let feature = uniform(&[1, 6], -1.0, 1.0, &mut r);
    let x = uniform(&[1, 5, 3], -0.9, 0.9, &mut r);
    let err = finite_diff_check(
        |tape, v| {
            let f = tape.constant(feature.clone());
            let s = model.sdf(tape, v, &f).map_err(|e| dsdf_tensor::TensorError::Domain {
                op: "sdf",
                detail: e.to_string(),
            })?;
            tape.sum(&s, None)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "∂Φ/∂x relative error {err}");
}

fn denoiser_inputs(b: usize, seed: u64) -> (Tensor, Vec<usize>, Tensor, Tensor) {
    let mut r = rng(seed);
    let z0 = uniform(&[b, 4], -0.5, 0.5, &mut r);
    let ts: Vec<usize> = (0..b).map(|i| 1 + (i * 7) % 20).collect();
    let eps = dsdf_core::modulation::gaussian(vec![b, 4], &mut r);
    let pi = uniform(&[b, 6], -1.0, 1.0, &mut r);
    (z0, ts, eps, pi)
}

fn check_denoiser(conditioning: Conditioning, seed: u64) -> f64 {
    let den = Denoiser::new(tiny_denoiser(conditioning), 4, 6, 8, seed).unwrap();
    let schedule = Schedule::new(&tiny_train_config().schedule).unwrap();
    let (z0, ts, eps, pi) = denoiser_inputs(3, seed);
    let cond = conditioning != Conditioning::None;
    check_param_gradients(
        &den.store,
        |tape, store| {
            let d = with_den_store(&den, store);
            let z0 = tape.constant(z0.clone());
            let zt = nn(schedule.q_sample_var(tape, &z0, &ts, &eps))?;
            let pi = cond.then(|| tape.constant(pi.clone()));
            Ok(nn(d.loss(tape, &z0, &zt, &ts, pi.as_ref()))?.0)
        },
        EPS,
    )
    .unwrap()
}

#[test]
fn unconditional_diffusion_loss_gradients() {
    let err = check_denoiser(Conditioning::None, 5);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn cross_attention_diffusion_loss_gradients() {
    let err = check_denoiser(Conditioning::CrossAttention, 6);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn concat_diffusion_loss_gradients() {
    let err = check_denoiser(Conditioning::Concat, 7);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn diffusion_loss_gradient_reaches_condition_encoder() {
    // Υ's parameters only see gradient through the cross-attention keys and values.
    let den = Denoiser::new(tiny_denoiser(Conditioning::CrossAttention), 4, 6, 8, 8).unwrap();
    let schedule = Schedule::new(&tiny_train_config().schedule).unwrap();
    let (z0, ts, eps, _) = denoiser_inputs(2, 8);
    let partial = uniform(&[2, 5, 3], -1.0, 1.0, &mut rng(9));
    let loss = |tape: &Tape, d: &Denoiser| -> dsdf_core::Result<Var> {
        let z0 = tape.constant(z0.clone());
        let zt = schedule.q_sample_var(tape, &z0, &ts, &eps)?;
        let pi = d.encode_condition(tape, &tape.constant(partial.clone()))?;
        Ok(d.loss(tape, &z0, &zt, &ts, Some(&pi))?.0)
    };
    let err = check_param_gradients(&den.store, |tape, store| nn(loss(tape, &with_den_store(&den, store))), EPS).unwrap();
    assert!(err < TOL, "relative error {err}");
}

fn finetune_fixture(conditioning: Conditioning) -> (ModulationModel, Denoiser, Schedule, FinetuneBatch) {
    let model = ModulationModel::new(tiny_modulation(), 10).unwrap();
    let mut den = Denoiser::new(tiny_denoiser(conditioning), 4, 6, 8, 11).unwrap();
    den.store.set_tape_offset(model.store.len());
    let schedule = Schedule::new(&tiny_train_config().schedule).unwrap();
    let mut r = rng(12);
    let modulation = random_batch(2, 5, 6, 4, &mut r);
    let condition = (conditioning != Conditioning::None).then(|| {
        (uniform(&[2, 5, 3], -1.0, 1.0, &mut r), Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap())
    });
    let batch = FinetuneBatch {
        modulation,
        timesteps: vec![3, 17],
        noise: dsdf_core::modulation::gaussian(vec![2, 4], &mut r),
        condition,
    };
    (model, den, schedule, batch)
}

#[test]
fn finetune_loss_gradients_in_both_models() {
    for conditioning in [Conditioning::None, Conditioning::CrossAttention] {
        let (model, den, schedule, batch) = finetune_fixture(conditioning);
        let err_mod = check_param_gradients(
            &model.store,
            |tape, store| {
                let m = with_store(&model, store);
                Ok(nn(finetune_loss(tape, &m, &den, &schedule, &batch, 0.1))?.total)
            },
            EPS,
        )
        .unwrap();
        let err_den = check_param_gradients(
            &den.store,
            |tape, store| {
                let d = with_den_store(&den, store);
                Ok(nn(finetune_loss(tape, &model, &d, &schedule, &batch, 0.1))?.total)
            },
            EPS,
        )
        .unwrap();
        assert!(err_mod < TOL && err_den < TOL, "{conditioning:?}: {err_mod} / {err_den}");
    }
}
