//! Central finite-difference check of analytic gradients, in f64.

use serde::Serialize;

use crate::autograd::{GradMode, Graph, Var};
use crate::bilm::{corrupt_nonempty, BiLm, BiLmConfig, CorruptionRates};
use crate::error::{Error, Result};
use crate::fusion::{FrozenVlm, FusionConfig, Variant, VideoFeatures};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tokenizer::{TokenSequence, N_SPECIAL};

pub const FD_STEP: f64 = 1e-3;
/// Std of the noise added to every weight of the multimodal check model.
pub const FIXTURE_JITTER: f32 = 0.1;
/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub frozen: bool,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The two shifted evaluations put some ReLU input on opposite sides of
    /// zero, so the central difference straddles a kink.
    pub kink: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    /// Worst error over probes of trainable scalars that do not straddle a
    /// ReLU kink.
    pub max_rel_error: f64,
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backprop gradients with central differences on `n_probes`
/// randomly drawn trainable scalars, plus any `extra` probes (which may be
/// frozen; those are reported but do not decide the verdict).
///
/// A drawn probe whose shifted evaluations flip the sign of some ReLU input
/// is reported with `kink` set and replaced by a fresh draw, up to
/// `n_probes` replacements in total.
///
/// `forward` must build a scalar loss deterministically.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    forward: F,
    n_probes: usize,
    tolerance: f64,
    seed: u64,
    extra: &[(ParamId, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::inference();
        let l = forward(&mut g, s)?;
        Ok((g.value(l).item()?, g.relu_signs()))
    };
    let (first, _) = eval(store)?;
    let (second, _) = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }

    let mut g = Graph::new(GradMode::All);
    let loss = forward(&mut g, store)?;
    let grads = g.backward(loss)?;

    let trainable: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, p)| (id, p.numel()))
        .collect();
    let total: usize = trainable.iter().map(|(_, n)| n).sum();
    let mut rng = RngStream::named(seed, "gradcheck.probes", 0);
    let mut draw = || -> Option<(ParamId, usize)> {
        if total == 0 {
            return None;
        }
        let mut k = rng.below(total);
        for &(id, n) in &trainable {
            if k < n {
                return Some((id, k));
            }
            k -= n;
        }
        None
    };

    let mut work = store.clone();
    let mut probe = |id: ParamId, idx: usize| -> Result<ProbeResult> {
        let orig = work.tensor(id).data()[idx];
        work.get_mut(id).tensor.data_mut()[idx] = orig + FD_STEP;
        let (plus, plus_signs) = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[idx] = orig - FD_STEP;
        let (minus, minus_signs) = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[idx]);
        let p = store.get(id);
        Ok(ProbeResult {
            param: p.name.clone(),
            index: idx,
            frozen: p.frozen,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            kink: plus_signs != minus_signs,
        })
    };

    let mut results = Vec::with_capacity(n_probes + extra.len());
    let (mut scored, mut redraws) = (0, 0);
    while scored < n_probes {
        let Some((id, idx)) = draw() else { break };
        let r = probe(id, idx)?;
        if !r.kink {
            scored += 1;
        } else if redraws < n_probes {
            redraws += 1;
        } else {
            scored += 1;
        }
        results.push(r);
    }
    for &(id, idx) in extra {
        results.push(probe(id, idx)?);
    }
    let max_rel_error = results
        .iter()
        .filter(|r| !r.frozen && !r.kink)
        .map(|r| r.rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        kinks: results.iter().filter(|r| r.kink).count(),
        passed: max_rel_error < tolerance,
        probes: results,
        max_rel_error,
        tolerance,
    })
}

/// Checks the full multimodal loss (projection, adapters, norms trainable,
/// two packed sequences with video prompts and a padded frame) on a small
/// model: 2 layers, D = 32. Weights are perturbed away from their
/// initialization so that adapters and attention are non-trivial.
pub fn multimodal_grad_check(n_probes: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = BiLmConfig {
        vocab_size: 24,
        hidden: 32,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 64,
        max_positions: 16,
        prompt_len: 4,
        max_text_len: 10,
        dropout: 0.1,
    };
    let fusion = FusionConfig {
        feature_dim: 6,
        adapter_dim: 0,
    };
    let mut vlm = FrozenVlm::from_lm(BiLm::new(cfg.clone(), seed)?, fusion, Variant::Frozen, seed)?;
    let mut rng = RngStream::named(seed, "gradcheck.model", 0);
    for p in vlm.store.params_mut() {
        for x in p.tensor.data_mut() {
            *x += FIXTURE_JITTER * rng.normal() as f32;
        }
    }
    let mut batches = Vec::new();
    let mut videos = Vec::new();
    for (k, (len, frames)) in [(8usize, 3usize), (6, 4)].into_iter().enumerate() {
        let mut ids = vec![crate::tokenizer::CLS];
        ids.extend((0..len - 2).map(|_| N_SPECIAL + rng.below(cfg.vocab_size - N_SPECIAL)));
        ids.push(crate::tokenizer::SEP);
        let tokens = TokenSequence {
            attention_mask: vec![1; ids.len()],
            ids,
        };
        batches.push(corrupt_nonempty(&tokens, &CorruptionRates::with_rate(0.4), cfg.vocab_size, &mut rng)?);
        let feats = (0..frames * 6).map(|_| rng.normal() as f32).collect();
        videos.push(VideoFeatures::new(format!("g{k}"), feats, vec![true; frames], 6)?.padded(4));
    }
    let store = vlm.store.cast::<f64>();
    grad_check(
        &store,
        |g, s| {
            let items: Vec<_> = videos.iter().zip(&batches).map(|(v, b)| (Some(v), b)).collect();
            vlm.view_with(s).batch_loss(g, &items, None)
        },
        n_probes,
        tolerance,
        seed,
        &[],
    )
}
