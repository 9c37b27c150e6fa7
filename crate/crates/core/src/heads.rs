//! Prediction heads and losses for the four pre-training tasks.

use crate::autodiff::Var;
use crate::backbone::{Encoded, PackedInput};
use crate::embed::Modality;
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, MaskTargets, Task};
use crate::model::Session;
use crate::tensor::Tensor;

/// Vocabulary logits `LN(gelu(x·W + b)) · Eᵀ + out_bias`, with `E` the text
/// token table.
pub fn mlm_logits(sess: &mut Session<'_>, rows: Var) -> Result<Var> {
    let t = sess.linear(rows, "head.mlm.transform")?;
    let t = sess.graph.gelu(t);
    let t = sess.layer_norm(t, "head.mlm.ln")?;
    let table = sess.param("embed.text.tokens")?;
    let et = sess.graph.transpose(table)?;
    let logits = sess.graph.matmul(t, et)?;
    let bias = sess.param("head.mlm.out_bias")?;
    sess.graph.add_row(logits, bias)
}

fn check_plans(packed: &PackedInput, plans: &[MaskPlan], task: Task) -> Result<()> {
    if plans.len() != packed.batch() {
        return Err(Error::Contract(format!(
            "{} plans for a batch of {}",
            plans.len(),
            packed.batch()
        )));
    }
    if let Some(p) = plans.iter().find(|p| p.task != task) {
        return Err(Error::Contract(format!(
            "{} loss received a {} plan",
            task.name(),
            p.task.name()
        )));
    }
    Ok(())
}

fn gather_targets(
    sess: &mut Session<'_>,
    enc: &Encoded,
    packed: &PackedInput,
    plans: &[MaskPlan],
    m: Modality,
) -> Result<Var> {
    let rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, plan)| plan.positions().into_iter().map(move |p| packed.row(b, m, p)))
        .collect();
    sess.graph.gather_rows(enc.hidden, &rows)
}

fn stacked(plans: &[MaskPlan]) -> Result<Tensor> {
    let parts = plans
        .iter()
        .map(|p| match &p.targets {
            MaskTargets::Frames(t) | MaskTargets::Teacher(t) => Ok(t),
            MaskTargets::Tokens(_) => Err(Error::Contract("expected frame targets".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::vstack(&parts)
}

/// Cross-entropy over the vocabulary at every planned text position.
pub fn wwmlm_loss(sess: &mut Session<'_>, enc: &Encoded, packed: &PackedInput, plans: &[MaskPlan]) -> Result<Var> {
    check_plans(packed, plans, Task::Wwmlm)?;
    let mut targets = Vec::new();
    for p in plans {
        match &p.targets {
            MaskTargets::Tokens(t) => targets.extend(t.iter().map(|&id| id as usize)),
            _ => return Err(Error::Contract("wwmlm plan without token targets".into())),
        }
    }
    let rows = gather_targets(sess, enc, packed, plans, Modality::Text)?;
    let logits = mlm_logits(sess, rows)?;
    sess.graph.cross_entropy(logits, &targets)
}

fn regression(
    sess: &mut Session<'_>,
    enc: &Encoded,
    packed: &PackedInput,
    plans: &[MaskPlan],
    task: Task,
    head: &str,
) -> Result<Var> {
    check_plans(packed, plans, task)?;
    let target = stacked(plans)?;
    let rows = gather_targets(sess, enc, packed, plans, task.modality())?;
    let pred = sess.linear(rows, head)?;
    sess.graph.l2_loss(pred, &target)
}

/// Squared error between regressed and original visual frames.
pub fn span_mvfr_loss(sess: &mut Session<'_>, enc: &Encoded, packed: &PackedInput, plans: &[MaskPlan]) -> Result<Var> {
    regression(sess, enc, packed, plans, Task::SpanMvfr, "head.visual_reg")
}

/// Squared error between regressed and original acoustic frames.
pub fn span_mafr_loss(sess: &mut Session<'_>, enc: &Encoded, packed: &PackedInput, plans: &[MaskPlan]) -> Result<Var> {
    regression(sess, enc, packed, plans, Task::SpanMafr, "head.acoustic_reg")
}

/// `KL(teacher ‖ softmax(head(x)))` at every masked visual frame.
pub fn span_mvfc_kl_loss(
    sess: &mut Session<'_>,
    enc: &Encoded,
    packed: &PackedInput,
    plans: &[MaskPlan],
) -> Result<Var> {
    check_plans(packed, plans, Task::SpanMvfcKl)?;
    let teacher = stacked(plans)?;
    let rows = gather_targets(sess, enc, packed, plans, Modality::Visual)?;
    let logits = sess.linear(rows, "head.visual_cls")?;
    sess.graph.kl_div(logits, &teacher)
}

pub fn task_loss(
    sess: &mut Session<'_>,
    task: Task,
    enc: &Encoded,
    packed: &PackedInput,
    plans: &[MaskPlan],
) -> Result<Var> {
    match task {
        Task::Wwmlm => wwmlm_loss(sess, enc, packed, plans),
        Task::SpanMvfr => span_mvfr_loss(sess, enc, packed, plans),
        Task::SpanMvfcKl => span_mvfc_kl_loss(sess, enc, packed, plans),
        Task::SpanMafr => span_mafr_loss(sess, enc, packed, plans),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{encode, pack};
    use crate::corpus::{generate, CorpusSpec, MultimodalSample};
    use crate::masking::{plan_for_task, MaskingConfig};
    use crate::model::{ModelConfig, ParamStore, Trainable};
    use crate::tokenizer::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            layers: 2,
            max_len: 64,
            visual_dim: 3,
            acoustic_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn samples() -> Vec<MultimodalSample> {
        let spec = CorpusSpec {
            counts: [2; 4],
            visual_dim: 3,
            acoustic_dim: 4,
            ..CorpusSpec::default()
        };
        generate(&spec, &Vocab::builtin()).unwrap().samples
    }

    fn run(task: Task, params: &ParamStore, cfg: &ModelConfig, seed: u64) -> (f64, Vec<(String, Tensor)>) {
        let vocab = Vocab::builtin();
        let s = samples();
        let batch: Vec<&MultimodalSample> = s.iter().take(3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plans: Vec<MaskPlan> = batch
            .iter()
            .map(|x| plan_for_task(x, task, &MaskingConfig::default(), &vocab, &mut rng).unwrap())
            .collect();
        let refs: Vec<Option<&MaskPlan>> = plans.iter().map(Some).collect();
        let packed = pack(&batch, &refs, &vocab, cfg.max_len).unwrap();
        let mut sess = Session::new(cfg, params, Trainable::All);
        let enc = encode(&mut sess, &packed).unwrap();
        let loss = task_loss(&mut sess, task, &enc, &packed, &plans).unwrap();
        let value = sess.graph.value(loss).item();
        sess.backward(loss).unwrap();
        (value, sess.gradients())
    }

    #[test]
    fn uniform_logits_give_log_vocab_and_log_classes() {
        let cfg = tiny();
        let mut params = cfg.init(0).unwrap();
        // zero token table makes every vocabulary logit equal
        let v = params.get("embed.text.tokens").unwrap().shape().to_vec();
        params.insert("embed.text.tokens", Tensor::zeros(&v));
        let (mlm, _) = run(Task::Wwmlm, &params, &cfg, 1);
        assert!((mlm - (cfg.vocab_size as f64).ln()).abs() < 1e-9);

        params.insert("head.visual_cls.weight", Tensor::zeros(&[8, 8]));
        let mut s = samples();
        for x in &mut s {
            let t = x.visual_teacher.as_mut().unwrap();
            for r in 0..t.rows() {
                let row = t.row_mut(r);
                row.fill(0.0);
                row[0] = 1.0;
            }
        }
        let vocab = Vocab::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = plan_for_task(&s[0], Task::SpanMvfcKl, &MaskingConfig::default(), &vocab, &mut rng).unwrap();
        let packed = pack(&[&s[0]], &[Some(&plan)], &vocab, 64).unwrap();
        let mut sess = Session::new(&cfg, &params, Trainable::All);
        let enc = encode(&mut sess, &packed).unwrap();
        let loss = span_mvfc_kl_loss(&mut sess, &enc, &packed, &[plan]).unwrap();
        assert!((sess.graph.value(loss).item() - 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn regression_at_optimum_is_zero() {
        let cfg = tiny();
        let mut params = cfg.init(0).unwrap();
        let vocab = Vocab::builtin();
        let mut s = samples().remove(0);
        let row = [0.5, -1.0, 2.0, 0.25];
        for r in 0..s.acoustic.rows() {
            s.acoustic.row_mut(r).copy_from_slice(&row);
        }
        params.insert("head.acoustic_reg.weight", Tensor::zeros(&[8, 4]));
        params.insert("head.acoustic_reg.bias", Tensor::vector(row.to_vec()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = plan_for_task(&s, Task::SpanMafr, &MaskingConfig::default(), &vocab, &mut rng).unwrap();
        let packed = pack(&[&s], &[Some(&plan)], &vocab, 64).unwrap();
        let mut sess = Session::new(&cfg, &params, Trainable::All);
        let enc = encode(&mut sess, &packed).unwrap();
        let loss = span_mafr_loss(&mut sess, &enc, &packed, &[plan]).unwrap();
        assert_eq!(sess.graph.value(loss).item(), 0.0);
    }

    #[test]
    fn every_task_reaches_the_first_layer() {
        let cfg = tiny();
        let params = cfg.init(1).unwrap();
        for task in Task::ALL {
            let (loss, grads) = run(task, &params, &cfg, 4);
            assert!(loss.is_finite() && loss > 0.0);
            let g = &grads.iter().find(|(n, _)| n == "layers.0.attn.q.weight").unwrap().1;
            assert!(g.norm() > 0.0, "{}", task.name());
        }
    }

    #[test]
    fn wrong_plan_is_a_contract_error() {
        let cfg = tiny();
        let params = cfg.init(1).unwrap();
        let vocab = Vocab::builtin();
        let s = samples();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = plan_for_task(&s[0], Task::SpanMvfr, &MaskingConfig::default(), &vocab, &mut rng).unwrap();
        let packed = pack(&[&s[0]], &[Some(&plan)], &vocab, 64).unwrap();
        let mut sess = Session::new(&cfg, &params, Trainable::All);
        let enc = encode(&mut sess, &packed).unwrap();
        assert!(matches!(
            span_mafr_loss(&mut sess, &enc, &packed, &[plan]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn head_weights_match_finite_differences() {
        use crate::gradcheck::{finite_difference_check, DEFAULT_STEP};
        let cfg = tiny();
        let params = cfg.init(9).unwrap();
        for (task, name) in [
            (Task::Wwmlm, "head.mlm.transform.weight"),
            (Task::SpanMvfr, "head.visual_reg.weight"),
            (Task::SpanMvfcKl, "head.visual_cls.weight"),
            (Task::SpanMafr, "head.acoustic_reg.weight"),
        ] {
            let (_, grads) = run(task, &params, &cfg, 5);
            let analytic = grads.iter().find(|(n, _)| n == name).unwrap().1.clone();
            let input = params.get(name).unwrap().clone();
            let coords: Vec<usize> = (0..input.numel()).step_by(3).take(8).collect();
            let err = finite_difference_check(
                &input,
                &coords,
                DEFAULT_STEP,
                1e-8,
                |t| {
                    let mut p = params.clone();
                    p.insert(name, t.clone());
                    Ok(run(task, &p, &cfg, 5).0)
                },
                &analytic,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
