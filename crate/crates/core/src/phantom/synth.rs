use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::record::{ClinicalRecord, Laterality, Surgery};
use super::volume::Grid;
use crate::error::{Error, Result};

/// Anatomy label values.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const LEFT_BREAST: u8 = 1;
    pub const RIGHT_BREAST: u8 = 2;
    pub const LEFT_NODES: u8 = 3;
    pub const RIGHT_NODES: u8 = 4;
    pub const CHEST_WALL: u8 = 5;
    pub const SKIN: u8 = 6;
}

/// Grid extent `H×W×S` (`W` is left-right; `w < W/2` is the left side) and voxel spacing in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { dims: [64, 64, 32], spacing: [1.0, 1.0, 3.0] }
    }
}

pub const NOISE_SIGMA: f64 = 0.03;

/// Mean intensity of each label, already on the normalized [0, 1] scale.
pub fn base_intensity(l: u8) -> f64 {
    match l {
        label::BACKGROUND => 0.0,
        label::SKIN => 0.25,
        label::LEFT_BREAST | label::RIGHT_BREAST => 0.45,
        label::LEFT_NODES | label::RIGHT_NODES => 0.65,
        label::CHEST_WALL => 0.85,
        _ => unreachable!("unknown label {l}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub intensity: Grid<f32>,
    pub labels: Grid<u8>,
    pub mask: Grid<u8>,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Left-side geometry; the right side is its mirror image.
struct Anatomy {
    breast: Ellipsoid,
    nodes: Ellipsoid,
    wall_h: (f64, f64),
    wall_w: f64,
    wall_s: (f64, f64),
}

impl Anatomy {
    fn draw(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let [h, w, s] = dims.map(|d| d as f64);
        let mut j = |scale: f64| rng.random_range(-1.0..=1.0) * scale;
        let breast = Ellipsoid {
            center: [(0.32 + j(0.02)) * h, (0.25 + j(0.02)) * w, (0.45 + j(0.04)) * s],
            radii: [(0.22 + j(0.02)) * h, (0.19 + j(0.015)) * w, (0.34 + j(0.03)) * s],
        };
        let nodes = Ellipsoid {
            center: [(0.50 + j(0.02)) * h, (0.10 + j(0.01)) * w, (0.86 + j(0.02)) * s],
            radii: [(0.08 * h).max(1.0), (0.07 * w).max(1.0), (0.12 * s).max(1.1)],
        };
        Self {
            breast,
            nodes,
            wall_h: ((0.60 + j(0.01)) * h, (0.74 + j(0.01)) * h),
            wall_w: 0.06 * w,
            wall_s: (0.12 * s, 0.88 * s),
        }
    }

    /// Membership tests at a voxel center folded onto the left half.
    fn in_breast(&self, p: [f64; 3]) -> bool {
        self.breast.contains(p) && p[0] < self.wall_h.0
    }

    fn in_wall(&self, p: [f64; 3]) -> bool {
        p[0] >= self.wall_h.0 && p[0] < self.wall_h.1 && p[1] >= self.wall_w && p[2] >= self.wall_s.0 && p[2] < self.wall_s.1
    }
}

/// Target side of a voxel column.
pub fn side_of(w: usize, width: usize) -> Laterality {
    if w < width / 2 {
        Laterality::Left
    } else {
        Laterality::Right
    }
}

/// Per-seed generator on its own ChaCha stream. Records draw from stream 0, so
/// anatomy (1) and noise (2) stay independent of every record field.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn grid_too_small(msg: String) -> Error {
    Error::Synthesis(msg)
}

/// Synthesizes the intensity volume, anatomy labels, and ground-truth target mask.
///
/// The anatomy and intensities depend only on `seed`; the record decides which
/// structures form the target. Both sides are mirror images of each other, so
/// the image carries no cue for laterality or stage.
pub fn synthesize(record: &ClinicalRecord, seed: u64, spec: &GridSpec) -> Result<Phantom> {
    let labels = anatomy_labels(seed, spec)?;
    let mask = target_mask(record, &labels)?;
    let mut rng = stream_rng(seed, 2);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let intensity = labels.map(|l| {
        let v = base_intensity(l) + noise.sample(&mut rng);
        v.clamp(0.0, 1.0) as f32
    });
    Ok(Phantom { intensity, labels, mask })
}

/// Label grid for a seed; mirror-symmetric across the `W` midline.
pub fn anatomy_labels(seed: u64, spec: &GridSpec) -> Result<Grid<u8>> {
    let [h, w, s] = spec.dims;
    if h < 8 || w < 8 || s < 4 || w % 2 != 0 {
        return Err(grid_too_small(format!("grid {:?} too small: need H,W ≥ 8, S ≥ 4 and even W", spec.dims)));
    }
    let mut rng = stream_rng(seed, 1);
    let anatomy = Anatomy::draw(spec.dims, &mut rng);
    let fold = |wi: usize| if wi < w / 2 { wi } else { w - 1 - wi };
    let center = |hi: usize, wi: usize, si: usize| [hi as f64 + 0.5, fold(wi) as f64 + 0.5, si as f64 + 0.5];

    let mut body = Grid::filled(spec.dims, spec.spacing, false);
    for hi in 0..h {
        for wi in 0..w {
            for si in 0..s {
                let p = center(hi, wi, si);
                body.set(hi, wi, si, anatomy.in_breast(p) || anatomy.in_wall(p));
            }
        }
    }
    let mut labels = Grid::filled(spec.dims, spec.spacing, label::BACKGROUND);
    for hi in 0..h {
        for wi in 0..w {
            for si in 0..s {
                let p = center(hi, wi, si);
                let left = wi < w / 2;
                let l = if body.get(hi, wi, si) {
                    let exposed = [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                        .iter()
                        .any(|&(dh, dw, ds)| {
                            let (a, b, c) = (hi as i64 + dh, wi as i64 + dw, si as i64 + ds);
                            a < 0
                                || b < 0
                                || c < 0
                                || a >= h as i64
                                || b >= w as i64
                                || c >= s as i64
                                || !body.get(a as usize, b as usize, c as usize)
                        });
                    if exposed {
                        label::SKIN
                    } else if anatomy.in_wall(p) {
                        label::CHEST_WALL
                    } else if left {
                        label::LEFT_BREAST
                    } else {
                        label::RIGHT_BREAST
                    }
                } else if anatomy.nodes.contains(p) {
                    if left {
                        label::LEFT_NODES
                    } else {
                        label::RIGHT_NODES
                    }
                } else {
                    label::BACKGROUND
                };
                labels.set(hi, wi, si, l);
            }
        }
    }
    let mut counts = [0usize; 7];
    for &l in labels.data() {
        counts[l as usize] += 1;
    }
    for (l, name) in [(1, "left breast"), (2, "right breast"), (3, "left nodes"), (4, "right nodes"), (5, "chest wall"), (6, "skin")] {
        if counts[l] == 0 {
            return Err(grid_too_small(format!("grid {:?} too small: {name} has no voxels", spec.dims)));
        }
    }
    Ok(labels)
}

/// Applies the delineation ruleset to a label grid.
///
/// Ipsilateral breast always; ipsilateral nodes when N ≥ N1 or T ≥ T3;
/// ipsilateral chest wall and skin after mastectomy only.
pub fn target_mask(record: &ClinicalRecord, labels: &Grid<u8>) -> Result<Grid<u8>> {
    let missing = |f: &str| Error::Synthesis(format!("record lacks {f}; the target depends on it"));
    let side = record.laterality.ok_or_else(|| missing("laterality"))?;
    let t = record.t_stage.ok_or_else(|| missing("t_stage"))?;
    let n = record.n_stage.ok_or_else(|| missing("n_stage"))?;
    let surgery = record.surgery.ok_or_else(|| missing("surgery"))?;
    let nodes = n.number() >= 1 || t.is_advanced();
    let (breast, node_label) = match side {
        Laterality::Left => (label::LEFT_BREAST, label::LEFT_NODES),
        Laterality::Right => (label::RIGHT_BREAST, label::RIGHT_NODES),
    };
    let width = labels.dims()[1];
    let mut mask = labels.map(|_| 0u8);
    for i in 0..labels.len() {
        let l = labels.data()[i];
        let [_, w, _] = labels.coords(i);
        let on_side = side_of(w, width) == side;
        let inside = l == breast
            || (nodes && l == node_label)
            || (surgery == Surgery::Mastectomy && on_side && (l == label::CHEST_WALL || l == label::SKIN));
        mask.data_mut()[i] = inside as u8;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::record::{NStage, TStage};

    const SPEC: GridSpec = GridSpec { dims: [24, 24, 12], spacing: [1.0, 1.0, 3.0] };

    fn count(g: &Grid<u8>, pred: impl Fn([usize; 3], u8) -> bool) -> usize {
        (0..g.len()).filter(|&i| pred(g.coords(i), g.data()[i])).count()
    }

    #[test]
    fn early_stage_conserving_is_the_left_breast_without_skin() {
        let r = ClinicalRecord::new(Laterality::Left, TStage::T1, NStage::N0, Surgery::BreastConserving, 52);
        let p = synthesize(&r, 3, &SPEC).unwrap();
        for i in 0..p.mask.len() {
            assert_eq!(p.mask.data()[i] == 1, p.labels.data()[i] == label::LEFT_BREAST);
        }
        assert_eq!(count(&p.mask, |[_, w, _], v| v == 1 && w >= 12), 0);
    }

    #[test]
    fn advanced_mastectomy_covers_nodes_and_chest_wall() {
        let r = ClinicalRecord::new(Laterality::Right, TStage::T3, NStage::N0, Surgery::Mastectomy, 60);
        let p = synthesize(&r, 4, &SPEC).unwrap();
        let missed = |l: u8| count(&p.labels, |[_, w, _], v| v == l && w >= 12) - count(&p.labels, |c, v| v == l && c[1] >= 12 && p.mask.get(c[0], c[1], c[2]) == 1);
        assert_eq!(missed(label::RIGHT_NODES), 0);
        assert_eq!(missed(label::CHEST_WALL), 0);
        assert_eq!(missed(label::SKIN), 0);
        assert_eq!(count(&p.mask, |[_, w, _], v| v == 1 && w < 12), 0);
    }

    #[test]
    fn laterality_mirrors_the_mask() {
        let left = ClinicalRecord::new(Laterality::Left, TStage::T2, NStage::N1, Surgery::Mastectomy, 45);
        let right = ClinicalRecord { laterality: Some(Laterality::Right), ..left };
        let a = synthesize(&left, 9, &SPEC).unwrap();
        let b = synthesize(&right, 9, &SPEC).unwrap();
        assert_eq!(a.mask.mirrored(), b.mask);
        assert_eq!(a.intensity, b.intensity);
    }

    #[test]
    fn labels_respect_the_midline() {
        let l = anatomy_labels(11, &SPEC).unwrap();
        for i in 0..l.len() {
            let [_, w, _] = l.coords(i);
            match l.data()[i] {
                label::LEFT_BREAST | label::LEFT_NODES => assert!(w < 12),
                label::RIGHT_BREAST | label::RIGHT_NODES => assert!(w >= 12),
                _ => {}
            }
        }
    }

    #[test]
    fn intensities_are_normalized() {
        let r = ClinicalRecord::sample(1);
        let p = synthesize(&r, 1, &SPEC).unwrap();
        assert!(p.intensity.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tiny_grids_are_rejected() {
        let r = ClinicalRecord::sample(1);
        for dims in [[4, 4, 4], [8, 8, 4], [24, 23, 12]] {
            let spec = GridSpec { dims, spacing: [1.0; 3] };
            assert!(matches!(synthesize(&r, 0, &spec), Err(Error::Synthesis(_))), "{dims:?}");
        }
    }

    #[test]
    fn omitted_fields_cannot_define_a_target() {
        let r = ClinicalRecord::sample(2).without(super::super::record::Field::Laterality);
        assert!(synthesize(&r, 2, &SPEC).is_err());
    }
}
