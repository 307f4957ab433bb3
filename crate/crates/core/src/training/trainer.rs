use super::metrics::{DivergenceMonitor, EvalRecord, MetricsLog, TrainRecord};
use super::plan::{batch_hash, gather, BatchPlan};
use super::{lr_schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{init_params, layout, loss_and_grads, sequence_losses, ModelConfig, TransformerParams};
use crate::numerics::{kernels, AdamWConfig, AdamWState, Tensor};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub params: TransformerParams<Tensor<f32>>,
    /// First divergent step, when the run was halted.
    pub diverged_at: Option<usize>,
    /// [`batch_hash`] of the tokens consumed at each completed step.
    pub batch_hashes: Vec<u64>,
}

/// Mean loss over the plan's validation windows. Per-sequence losses are
/// sorted before summation, so the estimate does not depend on evaluation order.
pub fn evaluate(
    params: &TransformerParams<Tensor<f32>>,
    cfg: &ModelConfig,
    val_tokens: &[usize],
    offsets: &[usize],
    context_len: usize,
    chunk: usize,
) -> Result<f64> {
    if offsets.is_empty() {
        return Err(Error::InvalidArgument("no validation windows".into()));
    }
    let mut losses = Vec::with_capacity(offsets.len());
    for part in offsets.chunks(chunk.max(1)) {
        let (inputs, targets) = gather(val_tokens, part, context_len);
        losses.extend(sequence_losses(params, &inputs, &targets, part.len(), cfg)?);
    }
    losses.sort_by(f64::total_cmp);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_plan(
    model: &ModelConfig,
    cfg: &TrainConfig,
    plan: &BatchPlan,
    train_len: usize,
    val_len: usize,
) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if plan.steps != cfg.total_steps || plan.batch_size != cfg.sequences_per_step() {
        return bad(format!(
            "plan covers {} steps of {} sequences, config wants {} of {}",
            plan.steps,
            plan.batch_size,
            cfg.total_steps,
            cfg.sequences_per_step()
        ));
    }
    if plan.context_len > model.context_len {
        return bad(format!(
            "plan context {} exceeds model context {}",
            plan.context_len, model.context_len
        ));
    }
    let fits = |offs: &[usize], len: usize| offs.iter().all(|&o| o + plan.context_len < len);
    if !fits(&plan.train_offsets, train_len) || !fits(&plan.val_offsets, val_len) {
        return bad("plan offsets exceed the token streams".into());
    }
    Ok(())
}

/// Runs AdamW over `plan`. Parameters are initialized from `cfg.seed`.
/// Matrices decay; embeddings and gains do not. Validation runs every
/// `eval_interval` steps and after the last step. On divergence the run halts
/// and the outcome holds everything logged so far.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    plan: &BatchPlan,
    train_tokens: &[usize],
    val_tokens: &[usize],
    mut on_step: impl FnMut(&TrainRecord, Option<&EvalRecord>),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    check_plan(model, cfg, plan, train_tokens.len(), val_tokens.len())?;
    if let Some(&t) = train_tokens.iter().chain(val_tokens).find(|&&t| t >= model.vocab_size) {
        return Err(Error::TargetOutOfRange {
            index: t,
            vocab: model.vocab_size,
        });
    }

    let mut params = init_params::<f32>(model, cfg.seed)?;
    let spec = layout(model);
    let mut opt = AdamWState::<f32>::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        spec.values().into_iter().map(|s| (&s.shape[..], s.kind.decays())),
    );
    let mut log = MetricsLog::new();
    let mut monitor = DivergenceMonitor::default();
    let mut batch_hashes = Vec::with_capacity(cfg.total_steps);
    let mut diverged_at = None;
    let ctx = plan.context_len;
    let inv_accum = 1.0 / cfg.grad_accum as f32;

    for step in 1..=cfg.total_steps {
        let offsets = plan.step_offsets(step);
        let (inputs, targets) = gather(train_tokens, offsets, ctx);
        batch_hashes.push(batch_hash(&inputs, &targets));

        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let per = cfg.batch_size * ctx;
        for (micro_in, micro_tg) in inputs.chunks(per).zip(targets.chunks(per)) {
            let (l, g) = loss_and_grads(&params, micro_in, micro_tg, cfg.batch_size, model)?;
            loss += l / cfg.grad_accum as f64;
            let g: Vec<Tensor<f32>> = g.values().into_iter().cloned().collect();
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        kernels::add_assign(a.data_mut(), b.data());
                    }
                }
            }
        }
        let mut grads = grads.expect("at least one micro-batch");
        if cfg.grad_accum > 1 {
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv_accum);
            }
        }

        let lr = lr_schedule(step, cfg);
        let grad_norm = if loss.is_finite() {
            let mut refs = params.values_mut();
            match opt.step(&mut refs, &grads, lr, cfg.grad_clip) {
                Ok(stats) => stats.grad_norm,
                Err(Error::NonFiniteGradient) => f64::NAN,
                Err(e) => return Err(e),
            }
        } else {
            f64::NAN
        };

        let hit = monitor.observe(step, loss, grad_norm);
        let record = TrainRecord {
            step,
            loss: loss as f32,
            lr: lr as f32,
            grad_norm: grad_norm as f32,
            diverged: hit.is_some(),
        };
        log.push_train(record)?;
        if hit.is_some() {
            diverged_at = hit;
            on_step(&record, None);
            break;
        }

        let eval = if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let v = evaluate(&params, model, val_tokens, &plan.val_offsets, ctx, cfg.batch_size)?;
            let r = EvalRecord {
                step,
                val_loss: v as f32,
            };
            log.push_val(r)?;
            Some(r)
        } else {
            None
        };
        on_step(&record, eval.as_ref());
    }

    Ok(TrainOutcome {
        log,
        params,
        diverged_at,
        batch_hashes,
    })
}
