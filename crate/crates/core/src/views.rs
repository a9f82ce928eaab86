//! Positive-view construction.
//!
//! In `geo` mode the partner of an anchor patch is drawn uniformly from the
//! patches strictly within `r_loc` metres of it; with no such patch the anchor
//! is its own partner, which reproduces standard single-image views exactly
//! (no random draws are consumed by the fallback).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survey::{Image, SpatialIndex, SurveyManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Standard,
    Geo,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Geo => "geo",
        })
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "geo" => Ok(Self::Geo),
            other => Err(Error::Config(format!(
                "unknown sampler mode {other:?}; expected one of: standard, geo"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Positive-pair radius in metres; required in geo mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_loc: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl SamplerConfig {
    pub fn standard() -> Self {
        Self {
            mode: SamplerMode::Standard,
            r_loc: None,
        }
    }

    pub fn geo(r_loc: f64) -> Self {
        Self {
            mode: SamplerMode::Geo,
            r_loc: Some(r_loc),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplerMode::Geo {
            match self.r_loc {
                Some(r) if r > 0.0 && r.is_finite() => {}
                Some(r) => return Err(Error::Config(format!("r_loc must be positive, got {r}"))),
                None => return Err(Error::Config("geo mode requires r_loc".into())),
            }
        }
        Ok(())
    }
}

/// Picks the image that supplies the second positive view for anchor `i`.
pub fn select_partner<R: Rng>(i: usize, cfg: &SamplerConfig, index: &SpatialIndex, rng: &mut R) -> Result<usize> {
    match (cfg.mode, cfg.r_loc) {
        (SamplerMode::Standard, _) => {
            if i >= index.len() {
                return Err(Error::UnknownPatch(i));
            }
            Ok(i)
        }
        (SamplerMode::Geo, Some(r)) => {
            let candidates = index.radius_query(i, r)?;
            if candidates.is_empty() {
                Ok(i)
            } else {
                Ok(candidates[rng.random_range(0..candidates.len())])
            }
        }
        (SamplerMode::Geo, None) => Err(Error::Config("geo mode requires r_loc".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub global_size: usize,
    pub local_size: usize,
    pub n_local: usize,
    /// Crop area as a fraction of the source image, for global views.
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Maximum hue rotation as a fraction of a full turn.
    pub hue: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            global_size: 64,
            local_size: 28,
            n_local: 4,
            global_scale: [0.4, 1.0],
            local_scale: [0.05, 0.4],
            hflip_p: 0.5,
            vflip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            hue: 0.05,
            blur_p: 0.5,
            blur_sigma: [0.1, 1.5],
        }
    }
}

impl AugmentParams {
    /// No-op augmentation producing full-frame views of size `global_size`.
    pub fn identity(global_size: usize) -> Self {
        Self {
            global_size,
            local_size: ((global_size as f64) / 5f64.sqrt()).floor().max(1.0) as usize,
            n_local: 2,
            global_scale: [1.0, 1.0],
            local_scale: [1.0, 1.0],
            hflip_p: 0.0,
            vflip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            blur_p: 0.0,
            blur_sigma: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.global_size == 0 || self.local_size == 0 {
            return bad("crop sizes must be positive".into());
        }
        if self.global_size * self.global_size < 5 * self.local_size * self.local_size {
            return bad(format!(
                "global crop {g}x{g} must carry at least 5x the pixels of local crop {l}x{l}",
                g = self.global_size,
                l = self.local_size
            ));
        }
        for (name, [lo, hi]) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < min <= max <= 1, got [{lo}, {hi}]"));
            }
        }
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("jitter_p", self.jitter_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        let [s0, s1] = self.blur_sigma;
        if !(s0 >= 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("blur_sigma must satisfy 0 <= min <= max, got [{s0}, {s1}]"));
        }
        Ok(())
    }
}

/// Augmented views produced for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub anchor: usize,
    pub partner: usize,
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    /// Source patch of each global view.
    pub global_sources: Vec<usize>,
    /// Source patch of each local view.
    pub local_sources: Vec<usize>,
}

/// Random resized crop, flips, colour jitter and blur, in that order.
pub fn augment<R: Rng>(image: &Image, ap: &AugmentParams, rng: &mut R) -> Result<Image> {
    augment_view(image, ap.global_size, ap.global_scale, ap, rng)
}

fn augment_view<R: Rng>(image: &Image, size: usize, scale: [f64; 2], ap: &AugmentParams, rng: &mut R) -> Result<Image> {
    let side_max = image.height().min(image.width());
    if size > side_max {
        return Err(Error::Invalid(format!(
            "crop {size}x{size} larger than image {}x{}",
            image.height(),
            image.width()
        )));
    }
    let area = if scale[0] < scale[1] {
        rng.random_range(scale[0]..=scale[1])
    } else {
        scale[0]
    };
    let side = ((area.sqrt() * side_max as f64).round() as usize).clamp(1, side_max);
    let y0 = rng.random_range(0..=image.height() - side);
    let x0 = rng.random_range(0..=image.width() - side);
    let mut out = resample(image, y0, x0, side, size);

    if rng.random_bool(ap.hflip_p) {
        flip(&mut out, true);
    }
    if rng.random_bool(ap.vflip_p) {
        flip(&mut out, false);
    }
    if rng.random_bool(ap.jitter_p) {
        let b = 1.0 + rng.random_range(-1.0..=1.0) * ap.brightness;
        let c = 1.0 + rng.random_range(-1.0..=1.0) * ap.contrast;
        let h = rng.random_range(-1.0..=1.0) * ap.hue;
        colour_jitter(&mut out, b, c, h);
    }
    if rng.random_bool(ap.blur_p) {
        let [s0, s1] = ap.blur_sigma;
        let sigma = if s0 < s1 { rng.random_range(s0..=s1) } else { s0 };
        gaussian_blur(&mut out, sigma);
    }
    Ok(out)
}

/// Bilinear resample of the `side × side` window at `(y0, x0)` to `size × size`.
fn resample(image: &Image, y0: usize, x0: usize, side: usize, size: usize) -> Image {
    let c = image.channels();
    let ratio = side as f64 / size as f64;
    let mut out = Image::filled(size, size, c, 0.0);
    let coord = |d: usize, origin: usize, limit: usize| -> (usize, usize, f32) {
        let s = (origin as f64 + (d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (limit - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    for dy in 0..size {
        let (ya, yb, fy) = coord(dy, y0, image.height());
        for dx in 0..size {
            let (xa, xb, fx) = coord(dx, x0, image.width());
            for ch in 0..c {
                let v = if fy == 0.0 && fx == 0.0 {
                    image.get(ya, xa, ch)
                } else {
                    let top = image.get(ya, xa, ch) * (1.0 - fx) + image.get(ya, xb, ch) * fx;
                    let bot = image.get(yb, xa, ch) * (1.0 - fx) + image.get(yb, xb, ch) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                out.set(dy, dx, ch, v);
            }
        }
    }
    out
}

fn flip(img: &mut Image, horizontal: bool) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            for ch in 0..c {
                img.set(y, x, ch, src.get(sy, sx, ch));
            }
        }
    }
}

fn colour_jitter(img: &mut Image, brightness: f64, contrast: f64, hue: f64) {
    let c = img.channels();
    let data = img.data_mut();
    for v in data.iter_mut() {
        *v = (*v as f64 * brightness).clamp(0.0, 1.0) as f32;
    }
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
    for v in data.iter_mut() {
        *v = ((*v as f64 - mean) * contrast + mean).clamp(0.0, 1.0) as f32;
    }
    if c == 3 && hue != 0.0 {
        // Rotation about the grey axis of RGB space.
        let (s, co) = (2.0 * PI * hue).sin_cos();
        let k = (1.0 - co) / 3.0;
        let r = (1.0f64 / 3.0).sqrt() * s;
        let m = [[co + k, k - r, k + r], [k + r, co + k, k - r], [k - r, k + r, co + k]];
        for px in data.chunks_exact_mut(3) {
            let p = [px[0] as f64, px[1] as f64, px[2] as f64];
            for (i, row) in m.iter().enumerate() {
                px[i] = (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    for horizontal in [true, false] {
        let src = img.clone();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, d) in kernel.iter().zip(-radius..=radius) {
                        let (sy, sx) = if horizontal {
                            (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                        };
                        acc += k * src.get(sy as usize, sx as usize, ch) as f64;
                    }
                    img.set(y, x, ch, acc.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
}

fn check_fits(survey: &SurveyManifest, id: usize, size: usize) -> Result<std::sync::Arc<Image>> {
    let img = survey.image(id)?;
    if size > img.height().min(img.width()) {
        return Err(Error::Invalid(format!(
            "crop {size}x{size} larger than image {} ({}x{})",
            id,
            img.height(),
            img.width()
        )));
    }
    Ok(img)
}

/// Two global views: one from `i`, one from `j`, independently augmented.
pub fn make_pair<R: Rng>(
    survey: &SurveyManifest,
    i: usize,
    j: usize,
    ap: &AugmentParams,
    rng: &mut R,
) -> Result<ViewSet> {
    let (img_i, img_j) = (
        check_fits(survey, i, ap.global_size)?,
        check_fits(survey, j, ap.global_size)?,
    );
    let g1 = augment(&img_i, ap, rng)?;
    let g2 = augment(&img_j, ap, rng)?;
    Ok(ViewSet {
        anchor: i,
        partner: j,
        globals: vec![g1, g2],
        locals: Vec::new(),
        global_sources: vec![i, j],
        local_sources: Vec::new(),
    })
}

/// Two global views (from `i` and `j`) plus `n_local` local views, all cropped from the anchor `i`.
pub fn make_multicrop<R: Rng>(
    survey: &SurveyManifest,
    i: usize,
    j: usize,
    ap: &AugmentParams,
    rng: &mut R,
) -> Result<ViewSet> {
    if ap.n_local == 0 {
        return Err(Error::Config("multi-crop requires n_local >= 1".into()));
    }
    let mut set = make_pair(survey, i, j, ap, rng)?;
    let img_i = check_fits(survey, i, ap.local_size)?;
    for _ in 0..ap.n_local {
        set.locals
            .push(augment_view(&img_i, ap.local_size, ap.local_scale, ap, rng)?);
        set.local_sources.push(i);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use crate::survey::{generate_survey, GeneratorConfig};

    fn survey() -> SurveyManifest {
        let cfg = GeneratorConfig {
            n_patches: 30,
            image_size: 32,
            habitat_scale_m: 20.0,
            ..GeneratorConfig::default()
        };
        generate_survey(&cfg, 11).unwrap()
    }

    fn small_params() -> AugmentParams {
        AugmentParams {
            global_size: 24,
            local_size: 10,
            n_local: 4,
            ..AugmentParams::default()
        }
    }

    #[test]
    fn geo_partner_is_uniform_over_neighbours() {
        let pos = vec![(0.0, 0.0), (50.0, 0.0), (0.0, 50.0), (1.0, 0.0), (0.0, 1.5), (0.0, 1.0)];
        let idx = SpatialIndex::new(pos, 2.0).unwrap();
        assert_eq!(idx.radius_query(0, 1.5).unwrap(), vec![3, 5]);
        let cfg = SamplerConfig::geo(1.5);
        let mut rng = keyed_rng(1, &[]);
        let draws = 10_000;
        let mut fours = 0;
        for _ in 0..draws {
            match select_partner(0, &cfg, &idx, &mut rng).unwrap() {
                3 => fours += 1,
                5 => {}
                other => panic!("partner {other} outside the radius"),
            }
        }
        let p = fours as f64 / draws as f64;
        assert!((p - 0.5).abs() < 0.05, "{p}");
        // Chi-square with one degree of freedom, 99.9% critical value 10.83.
        let e = draws as f64 / 2.0;
        let chi2 = (fours as f64 - e).powi(2) / e + ((draws - fours) as f64 - e).powi(2) / e;
        assert!(chi2 < 10.83, "chi2 {chi2}");
    }

    #[test]
    fn isolated_anchor_and_standard_mode_return_self() {
        let idx = SpatialIndex::new(vec![(0.0, 0.0), (10.0, 0.0)], 1.0).unwrap();
        let mut rng = keyed_rng(2, &[]);
        assert_eq!(select_partner(0, &SamplerConfig::geo(3.0), &idx, &mut rng).unwrap(), 0);
        assert_eq!(
            select_partner(1, &SamplerConfig::standard(), &idx, &mut rng).unwrap(),
            1
        );
        assert!(select_partner(5, &SamplerConfig::standard(), &idx, &mut rng).is_err());
    }

    #[test]
    fn sampler_config_validation() {
        assert!(SamplerConfig::standard().validate().is_ok());
        assert!(SamplerConfig::geo(2.0).validate().is_ok());
        assert!(SamplerConfig::geo(0.0).validate().is_err());
        let missing = SamplerConfig {
            mode: SamplerMode::Geo,
            r_loc: None,
        };
        assert!(missing.validate().is_err());
        assert_eq!("geo".parse::<SamplerMode>().unwrap(), SamplerMode::Geo);
        assert!("nearby".parse::<SamplerMode>().is_err());
    }

    #[test]
    fn identity_params_give_identical_views() {
        let s = survey();
        let ap = AugmentParams::identity(32);
        let v = make_pair(&s, 3, 3, &ap, &mut keyed_rng(0, &[])).unwrap();
        assert_eq!(v.globals[0], v.globals[1]);
        assert_eq!(v.globals[0], *s.image(3).unwrap());
    }

    #[test]
    fn pair_shape_and_provenance() {
        let s = survey();
        let ap = small_params();
        let v = make_pair(&s, 2, 5, &ap, &mut keyed_rng(0, &[])).unwrap();
        assert_eq!(v.global_sources, vec![2, 5]);
        assert!(v.locals.is_empty());
        for g in &v.globals {
            assert_eq!((g.height(), g.width(), g.channels()), (24, 24, 3));
            assert!(g.in_unit_range());
        }
        let too_big = AugmentParams {
            global_size: 40,
            local_size: 10,
            ..small_params()
        };
        assert!(make_pair(&s, 2, 5, &too_big, &mut keyed_rng(0, &[])).is_err());
    }

    #[test]
    fn multicrop_locals_come_from_anchor() {
        let s = survey();
        let ap = small_params();
        let v = make_multicrop(&s, 7, 8, &ap, &mut keyed_rng(4, &[])).unwrap();
        assert_eq!(v.globals.len(), 2);
        assert_eq!(v.locals.len(), 4);
        assert!(v.local_sources.iter().all(|&p| p == 7));
        let gp = v.globals[0].height() * v.globals[0].width();
        for l in &v.locals {
            assert!(l.height() * l.width() * 5 <= gp);
        }
    }

    #[test]
    fn augment_is_deterministic_and_clamped() {
        let s = survey();
        let img = s.image(0).unwrap();
        let ap = AugmentParams {
            brightness: 3.0,
            contrast: 3.0,
            jitter_p: 1.0,
            ..small_params()
        };
        let a = augment(&img, &ap, &mut keyed_rng(9, &[1])).unwrap();
        let b = augment(&img, &ap, &mut keyed_rng(9, &[1])).unwrap();
        assert_eq!(a, b);
        assert!(a.in_unit_range());
    }

    #[test]
    fn identity_augment_is_a_no_op() {
        let s = survey();
        let img = s.image(4).unwrap();
        let out = augment(&img, &AugmentParams::identity(32), &mut keyed_rng(3, &[])).unwrap();
        assert_eq!(out, *img);
    }

    #[test]
    fn augment_params_validation() {
        assert!(AugmentParams::default().validate().is_ok());
        assert!(AugmentParams::identity(64).validate().is_ok());
        let bad = AugmentParams {
            local_size: 30,
            ..AugmentParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentParams {
            hflip_p: 1.5,
            ..AugmentParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flips_and_blur_preserve_shape() {
        let img = Image::new(2, 3, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let mut h = img.clone();
        flip(&mut h, true);
        assert_eq!(h.data(), &[0.2, 0.1, 0.0, 0.5, 0.4, 0.3]);
        let mut v = img.clone();
        flip(&mut v, false);
        assert_eq!(v.data(), &[0.3, 0.4, 0.5, 0.0, 0.1, 0.2]);
        let mut flat = Image::filled(5, 5, 3, 0.4);
        gaussian_blur(&mut flat, 1.2);
        assert!(flat.data().iter().all(|&x| (x - 0.4).abs() < 1e-6));
    }
}
