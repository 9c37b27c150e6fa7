//! Properties that only hold after toy pre-training. The checkpoint is
//! trained once and shared.

use std::sync::OnceLock;

use mmemo::backbone::{encode, pack};
use mmemo::checkpoint::Checkpoint;
use mmemo::corpus::{generate, CorpusSpec, MultimodalSample};
use mmemo::downstream::argmax;
use mmemo::embed::Modality;
use mmemo::heads::task_loss;
use mmemo::masking::{plan_for_task, MaskPlan, MaskTargets, MaskingConfig, Task};
use mmemo::model::{Session, Trainable};
use mmemo::tokenizer::Vocab;
use mmemo::toy;
use mmemo::trainer::{pretrain, Log};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn checkpoint() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let vocab = Vocab::builtin();
        let corpus = generate(&toy::pretrain_spec(), &vocab).unwrap();
        pretrain(&corpus.samples, &toy::run_config(), &vocab, &mut Log::none())
            .unwrap()
            .checkpoint
    })
}

fn held_out() -> Vec<MultimodalSample> {
    let spec = CorpusSpec {
        counts: [16; 4],
        seed: 4242,
        ..toy::pretrain_spec()
    };
    generate(&spec, &Vocab::builtin()).unwrap().samples
}

#[test]
fn visual_classification_head_agrees_with_teacher_on_held_out_data() {
    let ck = checkpoint();
    let vocab = Vocab::builtin();
    let samples = held_out();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let plans: Vec<MaskPlan> = samples
        .iter()
        .map(|s| plan_for_task(s, Task::SpanMvfcKl, &MaskingConfig::default(), &vocab, &mut rng).unwrap())
        .collect();
    let batch: Vec<&MultimodalSample> = samples.iter().collect();
    let refs: Vec<Option<&MaskPlan>> = plans.iter().map(Some).collect();
    let packed = pack(&batch, &refs, &vocab, ck.config.max_len).unwrap();
    let mut sess = Session::new(&ck.config, &ck.params, Trainable::Nothing);
    let enc = encode(&mut sess, &packed).unwrap();
    let rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.positions().into_iter().map(move |f| (b, f)))
        .map(|(b, f)| packed.row(b, Modality::Visual, f))
        .collect();
    let hidden = sess.graph.gather_rows(enc.hidden, &rows).unwrap();
    let logits = sess.linear(hidden, "head.visual_cls").unwrap();
    let logits = sess.graph.value(logits).clone();

    let mut agree = 0;
    let mut i = 0;
    for plan in &plans {
        let MaskTargets::Teacher(t) = &plan.targets else {
            panic!("teacher targets")
        };
        for r in 0..t.rows() {
            if argmax(logits.row(i)) == argmax(t.row(r)) {
                agree += 1;
            }
            i += 1;
        }
    }
    let rate = agree as f64 / i as f64;
    assert!(rate >= 0.8, "teacher agreement {rate} over {i} frames");
}

#[test]
fn perturbing_an_untargeted_modality_changes_the_loss() {
    let ck = checkpoint();
    let vocab = Vocab::builtin();
    let samples = held_out();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let loss = |sample: &MultimodalSample, plan: &MaskPlan, task: Task| {
        let packed = pack(&[sample], &[Some(plan)], &vocab, ck.config.max_len).unwrap();
        let mut sess = Session::new(&ck.config, &ck.params, Trainable::Nothing);
        let enc = encode(&mut sess, &packed).unwrap();
        let l = task_loss(&mut sess, task, &enc, &packed, std::slice::from_ref(plan)).unwrap();
        sess.graph.value(l).item()
    };
    for (k, task) in Task::ALL.into_iter().enumerate() {
        let s = &samples[k * 7];
        let plan = plan_for_task(s, task, &MaskingConfig::default(), &vocab, &mut rng).unwrap();
        let base = loss(s, &plan, task);
        // perturb a modality the task does not mask
        let mut p = s.clone();
        let frames = if task.modality() == Modality::Acoustic {
            &mut p.visual
        } else {
            &mut p.acoustic
        };
        frames
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-1.0..1.0));
        let moved = loss(&p, &plan, task);
        assert!((moved - base).abs() > 1e-9, "{}: {base} vs {moved}", task.name());
    }
}
