//! Target assignment and the joint two-stage loss.

use crate::detector::stages::StageVars;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, Box};
use crate::tensor::{Tape, Var};

/// Per-proposal supervision for one stage: class label (0 = background),
/// encoded deltas (meaningful on foreground rows), and the foreground rows.
#[derive(Debug, Clone)]
pub struct StageTargets {
    pub labels: Vec<usize>,
    pub deltas: Vec<f64>,
    pub foreground: Vec<usize>,
}

/// Assign each proposal the class of its highest-IoU ground-truth box when
/// that IoU reaches `fg_iou`, else background. Foreground rows also get
/// encoded deltas toward their matched box.
pub fn assign_targets(proposals: &[Box], gt: &[(Box, usize)], fg_iou: f64) -> StageTargets {
    let mut labels = Vec::with_capacity(proposals.len());
    let mut deltas = vec![0.0; proposals.len() * 4];
    let mut foreground = Vec::new();
    for (r, p) in proposals.iter().enumerate() {
        let mut best: (f64, Option<(usize, usize)>) = (0.0, None);
        for (g, &(gbox, class_id)) in gt.iter().enumerate() {
            let v = iou(p, &gbox);
            if v > best.0 {
                best = (v, Some((g, class_id)));
            }
        }
        match best {
            (v, Some((g, class_id))) if v >= fg_iou => {
                labels.push(class_id);
                let d = encode_deltas(p, &gt[g].0);
                deltas[r * 4..(r + 1) * 4].copy_from_slice(&d);
                foreground.push(r);
            }
            _ => labels.push(0),
        }
    }
    StageTargets {
        labels,
        deltas,
        foreground,
    }
}

/// Per-stage loss: (Σ cross-entropy + Σ foreground smooth-L1) / R, summed
/// over stages with equal weight.
pub fn detector_loss(tape: &mut Tape, stages: &[(&StageVars, &StageTargets)]) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::Input("loss needs at least one stage".to_string()));
    }
    let mut total: Option<Var> = None;
    for (stage, targets) in stages {
        let r = targets.labels.len();
        if r == 0 {
            return Err(Error::Input("loss needs at least one proposal".to_string()));
        }
        if tape.shape(stage.scores)[0] != r {
            return Err(Error::shape(
                "detector_loss",
                format!("{} score rows vs {r} targets", tape.shape(stage.scores)[0]),
            ));
        }
        let ce = tape.cross_entropy_sum(stage.scores, &targets.labels)?;
        let sl1 = tape.smooth_l1_sum(stage.deltas, &targets.deltas, &targets.foreground)?;
        let stage_sum = tape.add(ce, sl1)?;
        let stage_loss = tape.scale(stage_sum, 1.0 / r as f64)?;
        total = Some(match total {
            Some(t) => tape.add(t, stage_loss)?,
            None => stage_loss,
        });
    }
    Ok(total.expect("at least one stage"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box {
        Box::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn assignment_splits_foreground_and_background() {
        let gt = vec![(b(10.0, 10.0, 8.0, 8.0), 2)];
        let proposals = vec![b(10.0, 10.0, 8.0, 8.0), b(40.0, 40.0, 8.0, 8.0)];
        let t = assign_targets(&proposals, &gt, 0.5);
        assert_eq!(t.labels, vec![2, 0]);
        assert_eq!(t.foreground, vec![0]);
        assert_eq!(&t.deltas[..4], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn near_perfect_predictions_drive_loss_to_zero() {
        let targets = StageTargets {
            labels: vec![1, 0],
            deltas: vec![0.0; 8],
            foreground: vec![0],
        };
        let mut tape = Tape::new();
        // Foreground row: huge margin on class 1; background row: on class 0.
        let scores = tape.constant(
            vec![-50.0, 50.0, -50.0, -50.0, 50.0, -50.0, -50.0, -50.0],
            vec![2, 4],
        );
        let deltas = tape.constant(vec![0.0; 8], vec![2, 4]);
        let loss = detector_loss(&mut tape, &[(&StageVars { scores, deltas }, &targets)]).unwrap();
        assert!(tape.value(loss)[0] < 1e-12);
    }

    #[test]
    fn all_background_batch_has_zero_regression_term() {
        let targets = StageTargets {
            labels: vec![0, 0],
            deltas: vec![9.0; 8],
            foreground: vec![],
        };
        let mut tape = Tape::new();
        let scores = tape.constant(vec![0.0; 8], vec![2, 4]);
        // Wild delta predictions must not matter without foreground rows.
        let deltas = tape.constant(vec![100.0; 8], vec![2, 4]);
        let loss = detector_loss(&mut tape, &[(&StageVars { scores, deltas }, &targets)]).unwrap();
        let expected = (4.0f64).ln(); // uniform logits over 4 classes
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_proposal_case() {
        // Stage with two proposals: row 0 foreground class 1, row 1 background.
        let targets = StageTargets {
            labels: vec![1, 0],
            deltas: vec![0.1, -0.2, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0],
            foreground: vec![0],
        };
        let s = vec![0.5, 1.5, -0.5, 0.25, 0.0, 0.0, 0.0, 0.0];
        let d = vec![0.2, 0.2, 0.0, -1.5, 0.0, 0.0, 0.0, 0.0];
        let mut tape = Tape::new();
        let scores = tape.constant(s.clone(), vec![2, 4]);
        let deltas = tape.constant(d.clone(), vec![2, 4]);
        let loss = detector_loss(&mut tape, &[(&StageVars { scores, deltas }, &targets)]).unwrap();

        // Independent scalar arithmetic.
        let lse0 = (s[0].exp() + s[1].exp() + s[2].exp() + s[3].exp()).ln();
        let ce0 = lse0 - s[1];
        let ce1 = (4.0f64).ln();
        let sl1 = |x: f64| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        };
        let reg = sl1(0.2 - 0.1) + sl1(0.2 - -0.2) + sl1(0.0) + sl1(-1.5 - 0.3);
        let expected = (ce0 + ce1 + reg) / 2.0;
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_stage_is_rejected() {
        let targets = StageTargets {
            labels: vec![],
            deltas: vec![],
            foreground: vec![],
        };
        let mut tape = Tape::new();
        let scores = tape.constant(vec![0.0; 4], vec![1, 4]);
        let deltas = tape.constant(vec![0.0; 4], vec![1, 4]);
        assert!(detector_loss(&mut tape, &[(&StageVars { scores, deltas }, &targets)]).is_err());
    }
}
