//! Synthetic lesion phantoms standing in for clinical CT / CT-PET cases.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dims3, MaskVolume, Spacing, Volume};
use crate::error::{Error, Result};
use crate::nn::Shape4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    /// Compact lesion whose cross-section swells and shrinks along z.
    EllipsoidStack,
    /// Long tube wandering through almost every slice.
    CurvedTube,
}

/// Axial band over which lesion contrast is attenuated, so a model trained on
/// clean data under-segments there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadeBand {
    pub start: usize,
    pub len: usize,
    /// Fraction of lesion contrast kept inside the band.
    pub residual: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims3,
    pub kind: LesionKind,
    /// Maximum in-plane displacement of the lesion contour per slice, voxels.
    pub drift: f64,
    pub noise_std: f64,
    /// Append a pseudo-PET channel (smoothed mask plus noise).
    pub pet_channel: bool,
    pub seed: u64,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
    #[serde(default)]
    pub fade: Option<FadeBand>,
}

fn default_spacing() -> Spacing {
    [2.5, 1.0, 1.0]
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims3::new(32, 64, 64),
            kind: LesionKind::EllipsoidStack,
            drift: 0.5,
            noise_std: 0.25,
            pet_channel: false,
            seed: 1,
            spacing: default_spacing(),
            fade: None,
        }
    }
}

const MIN_LESION_SLICES: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Section {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Section {
    fn rho(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let Dims3 { d, h, w } = self.dims;
        if d < MIN_LESION_SLICES + 2 || h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "dims {d}x{h}x{w} too small to host a lesion (need D >= {}, H, W >= 16)",
                MIN_LESION_SLICES + 2
            )));
        }
        if !(0.0..=0.75).contains(&self.drift) {
            return Err(Error::Config(format!("drift {} outside [0, 0.75]", self.drift)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        if let Some(f) = self.fade {
            if f.start + f.len > d || !(0.0..=1.0).contains(&f.residual) {
                return Err(Error::Config(format!("fade band {f:?} invalid for depth {d}")));
            }
        }
        Ok(())
    }

    fn sections(&self, rng: &mut ChaCha8Rng) -> Vec<Option<Section>> {
        let Dims3 { d, h, w } = self.dims;
        let (hf, wf) = (h as f64, w as f64);
        let mut out = vec![None; d];
        match self.kind {
            LesionKind::EllipsoidStack => {
                let len = (d / 2).max(MIN_LESION_SLICES).min(d - 2);
                let z0 = rng.gen_range(1..=d - 1 - len);
                let zc = z0 as f64 + (len as f64 - 1.0) / 2.0;
                let ry = rng.gen_range(0.12..0.17) * hf;
                let rx = rng.gen_range(0.12..0.17) * wf;
                let theta = rng.gen_range(0.0..2.0 * PI);
                let cy0 = hf / 2.0 + rng.gen_range(-0.08..0.08) * hf;
                let cx0 = wf / 2.0 + rng.gen_range(-0.08..0.08) * wf;
                for (z, s) in out.iter_mut().enumerate().skip(z0).take(len) {
                    let dz = z as f64 - zc;
                    let u = dz / (len as f64 / 2.0);
                    let scale = 1.0 - 0.5 * self.drift * u * u;
                    *s = Some(Section {
                        cy: cy0 + self.drift * dz * theta.sin(),
                        cx: cx0 + self.drift * dz * theta.cos(),
                        ry: ry * scale,
                        rx: rx * scale,
                    });
                }
            }
            LesionKind::CurvedTube => {
                let ry = rng.gen_range(0.10..0.13) * hf;
                let rx = ry * rng.gen_range(0.85..1.15);
                let omega = 2.0 * PI / d as f64 * rng.gen_range(0.7..1.3);
                let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
                let ay = (0.8 * self.drift / omega).min(0.12 * hf);
                let ax = (0.6 * self.drift / omega).min(0.12 * wf);
                let cy0 = hf / 2.0 + rng.gen_range(-0.05..0.05) * hf;
                let cx0 = wf / 2.0 + rng.gen_range(-0.05..0.05) * wf;
                for (z, s) in out.iter_mut().enumerate().take(d - 1).skip(1) {
                    let zf = z as f64;
                    *s = Some(Section {
                        cy: cy0 + ay * ((omega * zf + p1).sin() - p1.sin()),
                        cx: cx0 + ax * ((omega * zf + p2).cos() - p2.cos()),
                        ry,
                        rx,
                    });
                }
            }
        }
        out
    }
}

/// Generate an image volume and its lesion mask. Deterministic in the seed.
pub fn make_phantom(cfg: &PhantomConfig) -> Result<(Volume, MaskVolume)> {
    cfg.validate()?;
    let dims = cfg.dims;
    let Dims3 { d, h, w } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sections = cfg.sections(&mut rng);

    let mut mask = vec![false; dims.len()];
    let mut lesion = vec![0f32; dims.len()];
    for (z, sec) in sections.iter().enumerate() {
        let Some(sec) = sec else { continue };
        let r = 0.5 * (sec.ry + sec.rx);
        for y in 0..h {
            for x in 0..w {
                let rho = sec.rho(y, x);
                let i = dims.index(z, y, x);
                mask[i] = rho <= 1.0;
                lesion[i] = (1.0 / (1.0 + (-(1.0 - rho) * r / 0.6).exp())) as f32;
            }
        }
    }

    let fg = mask.iter().filter(|m| **m).count() as f64 / dims.len() as f64;
    if !(0.001..=0.10).contains(&fg) {
        return Err(Error::Config(format!(
            "foreground fraction {:.4} outside [0.001, 0.1]",
            fg
        )));
    }

    // Unlabelled distractor blobs with lower contrast than the lesion.
    let mut clutter = vec![0f32; dims.len()];
    for _ in 0..2 {
        let (bz, by, bx) = (
            rng.gen_range(0.0..d as f64),
            rng.gen_range(0.0..h as f64),
            rng.gen_range(0.0..w as f64),
        );
        let br = rng.gen_range(0.06..0.09) * h as f64;
        for z in 0..d {
            let dz = (z as f64 - bz) * 0.6;
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - by;
                    let dx = x as f64 - bx;
                    let dist = (dz * dz + dy * dy + dx * dx).sqrt();
                    if dist < br + 2.0 {
                        let v = 0.45 / (1.0 + ((dist - br) / 0.6).exp());
                        let c = &mut clutter[dims.index(z, y, x)];
                        *c = c.max(v as f32);
                    }
                }
            }
        }
    }

    let fade = |z: usize| -> f32 {
        match cfg.fade {
            Some(f) if z >= f.start && z < f.start + f.len => f.residual,
            _ => 1.0,
        }
    };

    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");
    let n = dims.len();
    let channels = if cfg.pet_channel { 2 } else { 1 };
    let mut data = Vec::with_capacity(channels * n);
    for i in 0..n {
        let z = i / dims.plane();
        let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
        data.push(clutter[i] + lesion[i] * fade(z) + eps);
    }
    if cfg.pet_channel {
        let soft: Vec<f32> = box_blur(&mask.iter().map(|m| *m as u8 as f32).collect::<Vec<_>>(), dims);
        for (i, s) in soft.iter().enumerate() {
            let z = i / dims.plane();
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            data.push(s * fade(z) + eps);
        }
    }
    let modality = if cfg.pet_channel {
        vec!["CT".to_string(), "PET".to_string()]
    } else {
        vec!["CT".to_string()]
    };
    let volume = Volume::new(Shape4::new(channels, d, h, w), data, cfg.spacing, modality)?;
    let mask = MaskVolume::new(dims, mask, cfg.spacing)?;
    Ok((volume, mask))
}

/// Attenuate the image inside `band` towards the local background, without
/// touching the label. Used to inject a failure region into an existing case.
pub fn fade_band(cfg: &PhantomConfig, band: FadeBand) -> Result<(Volume, MaskVolume)> {
    let mut c = cfg.clone();
    c.fade = Some(band);
    make_phantom(&c)
}

fn box_blur(src: &[f32], dims: Dims3) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if zz < 0 || yy < 0 || xx < 0 || zz >= dims.d as i64 || yy >= dims.h as i64 || xx >= dims.w as i64 {
                                continue;
                            }
                            acc += src[dims.index(zz as usize, yy as usize, xx as usize)];
                            cnt += 1.0;
                        }
                    }
                }
                out[dims.index(z, y, x)] = acc / cnt;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice_dsc(m: &MaskVolume, a: usize, b: usize) -> Option<f64> {
        let (sa, sb) = (m.axial(a), m.axial(b));
        let na = sa.iter().filter(|v| **v).count();
        let nb = sb.iter().filter(|v| **v).count();
        if na == 0 || nb == 0 {
            return None;
        }
        let inter = sa.iter().zip(sb).filter(|(x, y)| **x && **y).count();
        Some(2.0 * inter as f64 / (na + nb) as f64)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig { pet_channel: true, ..Default::default() };
        let (v1, m1) = make_phantom(&cfg).unwrap();
        let (v2, m2) = make_phantom(&cfg).unwrap();
        assert!(v1.data.iter().zip(&v2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(m1, m2);
        assert_eq!(v1.shape.c, 2);
    }

    #[test]
    fn default_dims_foreground_fraction() {
        for kind in [LesionKind::EllipsoidStack, LesionKind::CurvedTube] {
            let cfg = PhantomConfig { seed: 1, kind, ..Default::default() };
            let (_, m) = make_phantom(&cfg).unwrap();
            let frac = m.count() as f64 / m.dims.len() as f64;
            assert!((0.001..=0.10).contains(&frac), "{kind:?}: {frac}");
        }
    }

    #[test]
    fn zero_drift_gives_identical_slices() {
        for kind in [LesionKind::EllipsoidStack, LesionKind::CurvedTube] {
            let cfg = PhantomConfig { drift: 0.0, kind, seed: 9, ..Default::default() };
            let (_, m) = make_phantom(&cfg).unwrap();
            let nonempty: Vec<usize> = (0..m.dims.d).filter(|&z| m.axial(z).iter().any(|v| *v)).collect();
            assert!(nonempty.len() >= MIN_LESION_SLICES);
            for z in &nonempty[1..] {
                assert_eq!(m.axial(*z), m.axial(nonempty[0]));
            }
        }
    }

    #[test]
    fn lesion_spans_contiguous_slices() {
        let cfg = PhantomConfig { kind: LesionKind::EllipsoidStack, dims: Dims3::new(16, 32, 32), ..Default::default() };
        let (_, m) = make_phantom(&cfg).unwrap();
        let nonempty: Vec<usize> = (0..m.dims.d).filter(|&z| m.axial(z).iter().any(|v| *v)).collect();
        assert!(nonempty.len() >= MIN_LESION_SLICES);
        assert_eq!(nonempty.last().unwrap() - nonempty[0] + 1, nonempty.len());
    }

    #[test]
    fn tiny_dims_are_rejected() {
        let cfg = PhantomConfig { dims: Dims3::new(6, 64, 64), ..Default::default() };
        assert!(matches!(make_phantom(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn fade_keeps_label_and_dims_image() {
        let cfg = PhantomConfig { noise_std: 0.0, kind: LesionKind::CurvedTube, dims: Dims3::new(16, 32, 32), ..Default::default() };
        let (v0, m0) = make_phantom(&cfg).unwrap();
        let (v1, m1) = fade_band(&cfg, FadeBand { start: 6, len: 4, residual: 0.0 }).unwrap();
        assert_eq!(m0, m1);
        let p = m0.dims.plane();
        let inside: f32 = (0..p).filter(|&i| m0.axial(7)[i]).map(|i| v1.data[7 * p + i]).sum();
        let before: f32 = (0..p).filter(|&i| m0.axial(7)[i]).map(|i| v0.data[7 * p + i]).sum();
        assert!(inside < 0.5 * before);
        assert_eq!(&v0.data[..6 * p], &v1.data[..6 * p]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn adjacent_slices_change_gradually(seed in any::<u64>(), drift in 0.0f64..=0.75, tube in any::<bool>(), small in any::<bool>()) {
            let dims = if small { Dims3::new(16, 32, 32) } else { Dims3::new(32, 64, 64) };
            let kind = if tube { LesionKind::CurvedTube } else { LesionKind::EllipsoidStack };
            let cfg = PhantomConfig { seed, drift, kind, dims, ..Default::default() };
            let (_, m) = make_phantom(&cfg).unwrap();
            for z in 0..m.dims.d - 1 {
                if let Some(dsc) = slice_dsc(&m, z, z + 1) {
                    prop_assert!(dsc >= 0.7, "z={} dsc={}", z, dsc);
                }
            }
        }
    }
}
