//! End-point error, outlier percentage, and occlusion-split evaluation.

use crate::data::OcclusionMask;
use crate::error::{Result, SkError};
use crate::flow::FlowField;

/// Restrict a metric to a subset of pixels.
#[derive(Clone, Copy)]
pub enum PixelMask<'a> {
    All,
    Subset(&'a [bool]),
}

/// Outlier rule for the percentage metric. `And` is the official benchmark
/// definition (error > 3 px AND > 5% of the ground-truth magnitude); `Or`
/// flags a pixel when either bound is exceeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierRule {
    And,
    Or,
}

fn check_dims(pred: &FlowField, gt: &FlowField) -> Result<()> {
    if pred.w != gt.w || pred.h != gt.h || pred.resolution != gt.resolution {
        return Err(SkError::Invalid(format!(
            "flow fields disagree: {}x{} vs {}x{}",
            pred.w, pred.h, gt.w, gt.h
        )));
    }
    Ok(())
}

/// Mean end-point error over the selected pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, mask: PixelMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.u.len() {
        if let PixelMask::Subset(m) = mask {
            if m.len() != pred.u.len() {
                return Err(SkError::Invalid(format!(
                    "mask has {} entries for a {}x{} field",
                    m.len(),
                    pred.w,
                    pred.h
                )));
            }
            if !m[i] {
                continue;
            }
        }
        let du = pred.u[i] - gt.u[i];
        let dv = pred.v[i] - gt.v[i];
        sum += (du * du + dv * dv).sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(SkError::Invalid("end-point error over an empty pixel set".into()));
    }
    Ok(sum / n as f64)
}

/// Percentage of outlier pixels in [0, 100].
pub fn fl_all(pred: &FlowField, gt: &FlowField, rule: OutlierRule) -> Result<f64> {
    check_dims(pred, gt)?;
    let total = pred.u.len();
    if total == 0 {
        return Err(SkError::Invalid("outlier percentage over an empty field".into()));
    }
    let mut outliers = 0usize;
    for i in 0..total {
        let du = pred.u[i] - gt.u[i];
        let dv = pred.v[i] - gt.v[i];
        let err = (du * du + dv * dv).sqrt();
        let mag = (gt.u[i] * gt.u[i] + gt.v[i] * gt.v[i]).sqrt();
        let big = err > 3.0;
        let rel = err > 0.05 * mag;
        let out = match rule {
            OutlierRule::And => big && rel,
            OutlierRule::Or => big || rel,
        };
        if out {
            outliers += 1;
        }
    }
    Ok(100.0 * outliers as f64 / total as f64)
}

/// Per-sample report; the occluded / non-occluded errors are absent when
/// their split is empty.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub epe_all: f64,
    pub epe_occ: Option<f64>,
    pub epe_noc: Option<f64>,
    pub fl_all: f64,
    pub n_occ: usize,
    pub n_noc: usize,
}

impl EvalReport {
    /// epe_all * (n_occ + n_noc) = epe_occ * n_occ + epe_noc * n_noc, with
    /// empty splits contributing zero.
    pub fn decomposition_residual(&self) -> f64 {
        let occ = self.epe_occ.unwrap_or(0.0) * self.n_occ as f64;
        let noc = self.epe_noc.unwrap_or(0.0) * self.n_noc as f64;
        (self.epe_all * (self.n_occ + self.n_noc) as f64 - occ - noc).abs()
    }
}

pub fn split_eval(pred: &FlowField, gt: &FlowField, occ: &OcclusionMask, rule: OutlierRule) -> Result<EvalReport> {
    check_dims(pred, gt)?;
    if occ.w != pred.w || occ.h != pred.h {
        return Err(SkError::Invalid(format!(
            "occlusion mask {}x{} does not match the {}x{} flow",
            occ.w, occ.h, pred.w, pred.h
        )));
    }
    let n_occ = occ.count();
    let n_noc = occ.mask.len() - n_occ;
    let noc: Vec<bool> = occ.mask.iter().map(|m| !m).collect();
    let epe_occ = if n_occ > 0 { Some(epe(pred, gt, PixelMask::Subset(&occ.mask))?) } else { None };
    let epe_noc = if n_noc > 0 { Some(epe(pred, gt, PixelMask::Subset(&noc))?) } else { None };
    Ok(EvalReport {
        epe_all: epe(pred, gt, PixelMask::All)?,
        epe_occ,
        epe_noc,
        fl_all: fl_all(pred, gt, rule)?,
        n_occ,
        n_noc,
    })
}

pub const CSV_HEADER: &str = "image_id,epe_all,epe_occ,epe_noc,fl_all,n_occ,n_noc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn csv_row(image_id: &str, r: &EvalReport) -> String {
    format!(
        "{},{:.6},{},{},{:.6},{},{}",
        image_id,
        r.epe_all,
        opt(r.epe_occ),
        opt(r.epe_noc),
        r.fl_all,
        r.n_occ,
        r.n_noc
    )
}

/// Pixel-count-weighted aggregate over per-sample reports.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(SkError::Invalid("no reports to aggregate".into()));
    }
    let mut sum_all = 0.0;
    let mut sum_occ = 0.0;
    let mut sum_noc = 0.0;
    let mut sum_fl = 0.0;
    let (mut n_occ, mut n_noc) = (0usize, 0usize);
    for r in reports {
        let n = (r.n_occ + r.n_noc) as f64;
        sum_all += r.epe_all * n;
        sum_occ += r.epe_occ.unwrap_or(0.0) * r.n_occ as f64;
        sum_noc += r.epe_noc.unwrap_or(0.0) * r.n_noc as f64;
        sum_fl += r.fl_all * n;
        n_occ += r.n_occ;
        n_noc += r.n_noc;
    }
    let total = (n_occ + n_noc) as f64;
    Ok(EvalReport {
        epe_all: sum_all / total,
        epe_occ: if n_occ > 0 { Some(sum_occ / n_occ as f64) } else { None },
        epe_noc: if n_noc > 0 { Some(sum_noc / n_noc as f64) } else { None },
        fl_all: sum_fl / total,
        n_occ,
        n_noc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;
    use crate::rng::SkRng;

    fn rand_field(rng: &mut SkRng, w: usize, h: usize, scale: f64) -> FlowField {
        let u = (0..w * h).map(|_| rng.normal() * scale).collect();
        let v = (0..w * h).map(|_| rng.normal() * scale).collect();
        FlowField::new(w, h, u, v, Resolution::Full).unwrap()
    }

    #[test]
    fn identical_fields_score_zero() {
        let mut rng = SkRng::new(1);
        let f = rand_field(&mut rng, 5, 4, 2.0);
        assert_eq!(epe(&f, &f, PixelMask::All).unwrap(), 0.0);
        assert_eq!(fl_all(&f, &f, OutlierRule::And).unwrap(), 0.0);
    }

    #[test]
    fn single_pixel_is_euclidean_distance() {
        let p = FlowField::constant(1, 1, 3.0, 4.0, Resolution::Full);
        let g = FlowField::zeros(1, 1, Resolution::Full);
        assert!((epe(&p, &g, PixelMask::All).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn epe_matches_scalar_loop_oracle() {
        let mut rng = SkRng::new(2);
        let p = rand_field(&mut rng, 5, 5, 3.0);
        let g = rand_field(&mut rng, 5, 5, 3.0);
        let mut acc = 0.0;
        for y in 0..5 {
            for x in 0..5 {
                let (pu, pv) = p.at(y, x);
                let (gu, gv) = g.at(y, x);
                acc += ((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt();
            }
        }
        assert!((epe(&p, &g, PixelMask::All).unwrap() - acc / 25.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_dim_mismatch_rejected() {
        let f = FlowField::zeros(2, 2, Resolution::Full);
        let g = FlowField::zeros(3, 2, Resolution::Full);
        assert!(epe(&f, &g, PixelMask::All).is_err());
        assert!(epe(&f, &f, PixelMask::Subset(&[false; 4])).is_err());
    }

    #[test]
    fn outlier_rules_disagree_exactly_on_large_motion() {
        // three pixels: clean, large error at small motion, moderate error
        // at large motion; only the last flips between the two rules
        let g = FlowField::new(3, 1, vec![0.5, 1.0, 100.0], vec![0.0; 3], Resolution::Full).unwrap();
        let p = FlowField::new(3, 1, vec![0.5, 6.0, 104.0], vec![0.0; 3], Resolution::Full).unwrap();
        let and = fl_all(&p, &g, OutlierRule::And).unwrap();
        let or = fl_all(&p, &g, OutlierRule::Or).unwrap();
        assert!((and - 100.0 / 3.0).abs() < 1e-12, "{and}");
        assert!((or - 200.0 / 3.0).abs() < 1e-12, "{or}");
    }

    #[test]
    fn error_five_at_magnitude_ten_is_outlier() {
        let g = FlowField::constant(1, 1, 10.0, 0.0, Resolution::Full);
        let p = FlowField::constant(1, 1, 15.0, 0.0, Resolution::Full);
        assert_eq!(fl_all(&p, &g, OutlierRule::And).unwrap(), 100.0);
    }

    #[test]
    fn all_visible_split_degenerates() {
        let mut rng = SkRng::new(3);
        let p = rand_field(&mut rng, 4, 4, 1.0);
        let g = rand_field(&mut rng, 4, 4, 1.0);
        let occ = OcclusionMask::all_visible(4, 4);
        let r = split_eval(&p, &g, &occ, OutlierRule::And).unwrap();
        assert!(r.epe_occ.is_none());
        assert_eq!(r.epe_noc.unwrap(), r.epe_all);
        assert!(r.decomposition_residual() < 1e-9);
    }

    #[test]
    fn half_half_constant_errors_average() {
        let g = FlowField::zeros(2, 2, Resolution::Full);
        let p = FlowField::new(2, 2, vec![1.0, 1.0, 3.0, 3.0], vec![0.0; 4], Resolution::Full).unwrap();
        let occ = OcclusionMask { w: 2, h: 2, mask: vec![false, false, true, true] };
        let r = split_eval(&p, &g, &occ, OutlierRule::And).unwrap();
        assert!((r.epe_all - 2.0).abs() < 1e-15);
        assert!((r.epe_noc.unwrap() - 1.0).abs() < 1e-15);
        assert!((r.epe_occ.unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn decomposition_identity_on_random_masks() {
        let mut rng = SkRng::new(4);
        for _ in 0..50 {
            let p = rand_field(&mut rng, 7, 6, 4.0);
            let g = rand_field(&mut rng, 7, 6, 4.0);
            let mask: Vec<bool> = (0..42).map(|_| rng.uniform() < 0.3).collect();
            let occ = OcclusionMask { w: 7, h: 6, mask };
            let r = split_eval(&p, &g, &occ, OutlierRule::And).unwrap();
            assert!(r.decomposition_residual() < 1e-9, "{}", r.decomposition_residual());
        }
    }

    #[test]
    fn csv_row_layout() {
        let r = EvalReport { epe_all: 1.5, epe_occ: None, epe_noc: Some(1.5), fl_all: 0.0, n_occ: 0, n_noc: 16 };
        assert_eq!(csv_row("s0", &r), "s0,1.500000,,1.500000,0.000000,0,16");
        assert_eq!(CSV_HEADER.split(',').count(), csv_row("s0", &r).split(',').count());
    }

    #[test]
    fn aggregate_weights_by_pixel_count() {
        let a = EvalReport { epe_all: 1.0, epe_occ: None, epe_noc: Some(1.0), fl_all: 0.0, n_occ: 0, n_noc: 10 };
        let b = EvalReport { epe_all: 4.0, epe_occ: Some(4.0), epe_noc: None, fl_all: 100.0, n_occ: 30, n_noc: 0 };
        let agg = aggregate(&[a, b]).unwrap();
        assert!((agg.epe_all - 3.25).abs() < 1e-12);
        assert_eq!(agg.n_occ, 30);
        assert_eq!(agg.n_noc, 10);
        assert!(agg.decomposition_residual() < 1e-9);
    }
}
