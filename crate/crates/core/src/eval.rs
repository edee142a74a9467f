//! Detection matching, COCO-style average precision, per-class frequency
//! regression, and parameter-count reporting.

use crate::detector::params::HrParams;
use crate::error::{Error, Result};
use crate::geometry::{iou, Box};

/// One scored detection.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub box_: Box,
    pub class_id: usize,
    pub score: f64,
    pub image_id: usize,
}

/// One ground-truth instance.
#[derive(Debug, Clone, Copy)]
pub struct GtInstance {
    pub box_: Box,
    pub class_id: usize,
    pub image_id: usize,
}

/// IoU thresholds 0.5, 0.55, …, 0.95.
pub fn iou_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy matching: walking detections in descending score order, each one
/// claims the highest-IoU unmatched ground truth of its class in its image,
/// provided that IoU reaches the threshold. Returns one TP flag per
/// detection, in the given order.
pub fn match_detections(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Vec<bool> {
    debug_assert!(
        dets.windows(2).all(|w| w[0].score >= w[1].score),
        "detections must be sorted by descending score"
    );
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != det.class_id || gt.image_id != det.image_id {
                continue;
            }
            let v = iou(&det.box_, &gt.box_);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// 101-point interpolated average precision. `flags` must follow descending
/// score order; `n_gt` must be at least 1.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    assert!(
        n_gt >= 1,
        "average precision needs at least one ground truth"
    );
    if flags.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Interpolated precision: running max from the right.
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= target - 1e-12)
            .map_or(0.0, |idx| precisions[idx]);
        total += p;
    }
    total / 101.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub gt_count: usize,
    pub ap50: f64,
    /// Mean over the IoU grid 0.5…0.95.
    pub ap: f64,
}

/// Per-class and overall AP. Classes without ground truth are listed with
/// zero counts but excluded from the means.
#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    pub per_class: Vec<ClassAp>,
    pub mean_ap50: f64,
    pub mean_ap: f64,
}

pub fn ap_report(dets: &[Detection], gts: &[GtInstance], num_classes: usize) -> ApReport {
    let grid = iou_grid();
    let mut per_class = Vec::with_capacity(num_classes);
    for class_id in 1..=num_classes {
        let mut class_dets: Vec<Detection> = dets
            .iter()
            .copied()
            .filter(|d| d.class_id == class_id)
            .collect();
        // Stable sort keeps insertion order on ties, so results do not depend
        // on the comparison of equal scores.
        class_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        let class_gts: Vec<GtInstance> = gts
            .iter()
            .copied()
            .filter(|g| g.class_id == class_id)
            .collect();
        let gt_count = class_gts.len();
        if gt_count == 0 {
            per_class.push(ClassAp {
                class_id,
                gt_count: 0,
                ap50: 0.0,
                ap: 0.0,
            });
            continue;
        }
        let mut ap_sum = 0.0;
        let mut ap50 = 0.0;
        for (ti, &thr) in grid.iter().enumerate() {
            let flags = match_detections(&class_dets, &class_gts, thr);
            let ap = average_precision(&flags, gt_count);
            if ti == 0 {
                ap50 = ap;
            }
            ap_sum += ap;
        }
        per_class.push(ClassAp {
            class_id,
            gt_count,
            ap50,
            ap: ap_sum / grid.len() as f64,
        });
    }
    let counted: Vec<&ClassAp> = per_class.iter().filter(|c| c.gt_count > 0).collect();
    let denom = counted.len().max(1) as f64;
    ApReport {
        mean_ap50: counted.iter().map(|c| c.ap50).sum::<f64>() / denom,
        mean_ap: counted.iter().map(|c| c.ap).sum::<f64>() / denom,
        per_class,
    }
}

/// Least-squares line fitted to (x, y) points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyRegression {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares of y against x. Errors when fewer than two points
/// are given or all x coincide (slope undefined).
pub fn least_squares(points: &[(f64, f64)]) -> Result<FrequencyRegression> {
    if points.len() < 2 {
        return Err(Error::Parameter(
            "regression needs at least two points".to_string(),
        ));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter(
            "regression slope undefined: all x values coincide".to_string(),
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    Ok(FrequencyRegression {
        slope,
        intercept: mean_y - slope * mean_x,
    })
}

/// ΔAP against ground-truth counts, as in the frequency analysis plot.
pub fn class_frequency_regression(
    delta_ap: &[f64],
    counts: &[usize],
) -> Result<FrequencyRegression> {
    if delta_ap.len() != counts.len() {
        return Err(Error::Parameter(
            "delta_ap and counts lengths differ".to_string(),
        ));
    }
    let points: Vec<(f64, f64)> = counts
        .iter()
        .zip(delta_ap)
        .map(|(&c, &d)| (c as f64, d))
        .collect();
    least_squares(&points)
}

/// Per-class ΔAP between two evaluations plus least-squares fits of ΔAP
/// against ground-truth count and against its natural log.
#[derive(Debug, Clone)]
pub struct DeltaReport {
    /// (class_id, gt_count, Δap50, Δap) for classes with ground truth.
    pub per_class: Vec<(usize, usize, f64, f64)>,
    pub fit_ap50_count: FrequencyRegression,
    pub fit_ap50_logcount: FrequencyRegression,
    pub fit_ap_count: FrequencyRegression,
    pub fit_ap_logcount: FrequencyRegression,
}

/// ΔAP of `new` over `base`. Both must come from the same split: identical
/// class ids and ground-truth counts.
pub fn delta_report(base: &ApReport, new: &ApReport) -> Result<DeltaReport> {
    if base.per_class.len() != new.per_class.len() {
        return Err(Error::Config(
            "reports cover different class sets".to_string(),
        ));
    }
    let mut per_class = Vec::new();
    for (a, b) in base.per_class.iter().zip(&new.per_class) {
        if a.class_id != b.class_id || a.gt_count != b.gt_count {
            return Err(Error::Config(format!(
                "class {} mismatch: counts {} vs {}",
                a.class_id, a.gt_count, b.gt_count
            )));
        }
        if a.gt_count > 0 {
            per_class.push((a.class_id, a.gt_count, b.ap50 - a.ap50, b.ap - a.ap));
        }
    }
    let counts: Vec<f64> = per_class.iter().map(|p| p.1 as f64).collect();
    let logs: Vec<f64> = counts.iter().map(|c| c.ln()).collect();
    let d50: Vec<f64> = per_class.iter().map(|p| p.2).collect();
    let dap: Vec<f64> = per_class.iter().map(|p| p.3).collect();
    let fit = |xs: &[f64], ys: &[f64]| {
        least_squares(
            &xs.iter()
                .copied()
                .zip(ys.iter().copied())
                .collect::<Vec<_>>(),
        )
    };
    Ok(DeltaReport {
        fit_ap50_count: fit(&counts, &d50)?,
        fit_ap50_logcount: fit(&logs, &d50)?,
        fit_ap_count: fit(&counts, &dap)?,
        fit_ap_logcount: fit(&logs, &dap)?,
        per_class,
    })
}

/// Parameter counts bucketed by component. The attention bucket covers the
/// edge MLPs only; fusion layers are reported separately since they scale
/// with the feature width rather than with the relational machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountReport {
    pub backbone: usize,
    /// (component name, edge-MLP params, fusion params) per GAM instance.
    pub gams: Vec<(String, usize, usize)>,
    pub projections: usize,
    pub box_head: usize,
    pub total: usize,
    pub attention_total: usize,
    pub fusion_total: usize,
    /// attention_total / box_head.
    pub attention_to_head_ratio: f64,
}

pub fn param_count_report(params: &HrParams) -> ParamCountReport {
    let mut backbone = 0;
    let mut projections = 0;
    let mut box_head = 0;
    let mut total = 0;
    let mut gams: Vec<(String, usize, usize)> = ["pixel_gam", "scale_gam", "roi_gam"]
        .iter()
        .map(|n| (n.to_string(), 0, 0))
        .collect();
    for (name, t) in params.named_tensors() {
        let n = t.numel();
        total += n;
        if name.starts_with("backbone.") {
            backbone += n;
        } else if name.starts_with("box_head") {
            box_head += n;
        } else if name.ends_with("proj.w") || name.ends_with("proj.b") {
            projections += n;
        } else if let Some(gam) = gams
            .iter_mut()
            .find(|(g, _, _)| name.starts_with(g.as_str()))
        {
            if name.contains(".edge_mlp") {
                gam.1 += n;
            } else {
                gam.2 += n;
            }
        }
    }
    let attention_total = gams.iter().map(|g| g.1).sum();
    let fusion_total = gams.iter().map(|g| g.2).sum();
    ParamCountReport {
        backbone,
        gams,
        projections,
        box_head,
        total,
        attention_total,
        fusion_total,
        attention_to_head_ratio: attention_total as f64 / box_head as f64,
    }
}

/// Absolute counts per component plus the attention/box-head ratio.
pub fn format_param_report(report: &ParamCountReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24} {:>10}\n", "component", "params"));
    out.push_str(&format!("{:<24} {:>10}\n", "backbone", report.backbone));
    for (name, attention, fusion) in &report.gams {
        out.push_str(&format!(
            "{:<24} {:>10}\n",
            format!("{name}.edge_mlp"),
            attention
        ));
        out.push_str(&format!(
            "{:<24} {:>10}\n",
            format!("{name}.fusion"),
            fusion
        ));
    }
    out.push_str(&format!(
        "{:<24} {:>10}\n",
        "projections", report.projections
    ));
    out.push_str(&format!("{:<24} {:>10}\n", "box_head", report.box_head));
    out.push_str(&format!("{:<24} {:>10}\n", "total", report.total));
    out.push_str(&format!(
        "attention_total={} fusion_total={} attention/box_head={:.6}\n",
        report.attention_total, report.fusion_total, report.attention_to_head_ratio
    ));
    out
}
