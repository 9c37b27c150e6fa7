//! Modality embedders: project raw input to the model width, add position
//! and modality-type embeddings, then layer-normalize. Each modality owns an
//! independent parameter set of the same structure.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::Session;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Visual,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Acoustic];

    /// Row of the type table added to every position of this modality.
    pub fn type_id(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
            Modality::Acoustic => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
        }
    }
}

/// Raw input for one modality segment.
#[derive(Clone, Copy, Debug)]
pub enum RawInput<'a> {
    Tokens(&'a [usize]),
    Frames(&'a Tensor),
}

impl RawInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            RawInput::Tokens(ids) => ids.len(),
            RawInput::Frames(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `layer_norm(project(raw) + positions[0..T] + types[modality])` → `[T × H]`.
pub fn embed(sess: &mut Session<'_>, modality: Modality, raw: RawInput<'_>) -> Result<Var> {
    let t = raw.len();
    let max = sess.config.max_len;
    if t > max {
        return Err(Error::Length {
            len: t,
            max,
            context: format!("{} segment", modality.name()),
        });
    }
    if t == 0 {
        return Err(Error::InvalidInput(format!("empty {} segment", modality.name())));
    }
    let m = modality.name();
    let projected = match (modality, raw) {
        (Modality::Text, RawInput::Tokens(ids)) => {
            let table = sess.param("embed.text.tokens")?;
            sess.graph.embedding(table, ids)?
        }
        (Modality::Visual | Modality::Acoustic, RawInput::Frames(frames)) => {
            let x = sess.graph.constant(frames.clone());
            sess.linear(x, &format!("embed.{m}.proj"))?
        }
        _ => {
            return Err(Error::InvalidInput(format!(
                "{m} embedder received the wrong kind of input"
            )))
        }
    };
    let table = sess.param(&format!("embed.{m}.positions"))?;
    let pos = sess.graph.embedding(table, &(0..t).collect::<Vec<_>>())?;
    let types = sess.param(&format!("embed.{m}.types"))?;
    let ty = sess.graph.embedding(types, &vec![modality.type_id(); t])?;
    let sum = sess.graph.add(projected, pos)?;
    let sum = sess.graph.add(sum, ty)?;
    sess.layer_norm(sum, &format!("embed.{m}.ln"))
}

/// Replaces the listed frame rows with zero vectors.
pub fn mask_frame_input(raw: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let t = raw.rows();
    let mut out = raw.clone();
    for &p in positions {
        if p >= t {
            return Err(Error::Index { index: p, len: t });
        }
        out.row_mut(p).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Trainable};

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            layers: 1,
            max_len: 16,
            visual_dim: 3,
            acoustic_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn frames(rows: usize, d: usize) -> Tensor {
        Tensor::new(vec![rows, d], (0..rows * d).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap()
    }

    #[test]
    fn text_type_id_is_zero() {
        assert_eq!(Modality::Text.type_id(), 0);
        assert_eq!(Modality::Visual.type_id(), 1);
        assert_eq!(Modality::Acoustic.type_id(), 2);
    }

    #[test]
    fn output_rows_are_standardized() {
        let cfg = ModelConfig {
            ln_eps: 1e-12,
            ..tiny()
        };
        let params = cfg.init(0).unwrap();
        let mut s = Session::new(&cfg, &params, Trainable::All);
        let x = frames(5, 3);
        let out = embed(&mut s, Modality::Visual, RawInput::Frames(&x)).unwrap();
        let v = s.graph.value(out);
        assert_eq!(v.shape(), &[5, 8]);
        // fresh gain = 1, bias = 0, so the output is the pre-affine value
        for r in 0..5 {
            let mean = v.row(r).iter().sum::<f64>() / 8.0;
            let var = v.row(r).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn modalities_differ_on_identical_input() {
        let cfg = tiny();
        let params = cfg.init(0).unwrap();
        let mut s = Session::new(&cfg, &params, Trainable::All);
        let x = frames(4, 3);
        let a = embed(&mut s, Modality::Visual, RawInput::Frames(&x)).unwrap();
        let b = embed(&mut s, Modality::Acoustic, RawInput::Frames(&x)).unwrap();
        assert_ne!(s.graph.value(a), s.graph.value(b));
    }

    #[test]
    fn overlong_and_mismatched_inputs_rejected() {
        let cfg = tiny();
        let params = cfg.init(0).unwrap();
        let mut s = Session::new(&cfg, &params, Trainable::All);
        let ids = vec![5; 17];
        assert!(matches!(
            embed(&mut s, Modality::Text, RawInput::Tokens(&ids)),
            Err(Error::Length { len: 17, max: 16, .. })
        ));
        let x = frames(2, 3);
        assert!(embed(&mut s, Modality::Text, RawInput::Frames(&x)).is_err());
    }

    #[test]
    fn frame_masking() {
        let x = frames(10, 3);
        let m = mask_frame_input(&x, &[4, 5, 6]).unwrap();
        for r in 0..10 {
            if (4..=6).contains(&r) {
                assert!(m.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(m.row(r), x.row(r));
            }
        }
        assert_eq!(mask_frame_input(&x, &[]).unwrap(), x);
        assert_eq!(mask_frame_input(&m, &[4, 5, 6]).unwrap(), m);
        assert!(matches!(
            mask_frame_input(&x, &[10]),
            Err(Error::Index { index: 10, len: 10 })
        ));
    }

    #[test]
    fn masked_rows_do_not_leak_into_other_rows() {
        let cfg = tiny();
        let params = cfg.init(1).unwrap();
        let x = frames(6, 3);
        let mut y = x.clone();
        y.row_mut(2).copy_from_slice(&[9.0, -9.0, 4.0]);
        let run = |t: &Tensor| {
            let mut s = Session::new(&cfg, &params, Trainable::All);
            let masked = mask_frame_input(t, &[2]).unwrap();
            let out = embed(&mut s, Modality::Acoustic, RawInput::Frames(&masked)).unwrap();
            s.graph.value(out).clone()
        };
        assert_eq!(run(&x), run(&y));

        // without masking, only the changed row moves
        let plain = |t: &Tensor| {
            let mut s = Session::new(&cfg, &params, Trainable::All);
            let out = embed(&mut s, Modality::Acoustic, RawInput::Frames(t)).unwrap();
            s.graph.value(out).clone()
        };
        let (a, b) = (plain(&x), plain(&y));
        for r in 0..6 {
            assert_eq!(a.row(r) == b.row(r), r != 2);
        }
    }
}
