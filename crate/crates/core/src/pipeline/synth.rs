//! Synthetic scene-labeling tasks.
//!
//! `longrange`: a textured square whose class is decided only by a small
//! striped cue in a far corner. Samples come in pairs that are identical
//! except for the cue orientation, so the texture carries no class signal.
//!
//! `multiscale`: flat squares whose class is their size octave
//! (`[2,4)`, `[4,8)`, `[8,16)` pixels), so each class is best seen at a
//! different pyramid level.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

use super::dataset::LabeledSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    LongRange,
    MultiScale,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::LongRange => "longrange",
            SynthKind::MultiScale => "multiscale",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "longrange" => Ok(SynthKind::LongRange),
            "multiscale" => Ok(SynthKind::MultiScale),
            other => Err(Error::Config(format!(
                "unknown synthetic task `{other}` (expected longrange or multiscale)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub kind: SynthKind,
    pub classes: usize,
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub samples: Vec<LabeledSample>,
}

/// Side of the 4×4 cue patch.
pub const CUE: usize = 4;

/// Layout of one `longrange` sample, exposed for checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LongRangeLayout {
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub corner: usize,
    pub cue_row: usize,
    pub cue_col: usize,
    pub region_row: usize,
    pub region_col: usize,
    pub region_side: usize,
}

impl LongRangeLayout {
    pub fn new(size: usize, corner: usize) -> Self {
        let side = size * 3 / 8;
        let bottom = corner >= 2;
        let right = corner % 2 == 1;
        let far = |flip: bool| if flip { size / 2 - side } else { size / 2 };
        LongRangeLayout {
            corner,
            cue_row: if bottom { size - CUE } else { 0 },
            cue_col: if right { size - CUE } else { 0 },
            region_row: far(bottom),
            region_col: far(right),
            region_side: side,
        }
    }

    pub fn in_region(&self, r: usize, c: usize) -> bool {
        (self.region_row..self.region_row + self.region_side).contains(&r)
            && (self.region_col..self.region_col + self.region_side).contains(&c)
    }

    pub fn in_cue(&self, r: usize, c: usize) -> bool {
        (self.cue_row..self.cue_row + CUE).contains(&r) && (self.cue_col..self.cue_col + CUE).contains(&c)
    }

    /// Euclidean distance between the cue centre and the region centroid.
    pub fn cue_distance(&self) -> f64 {
        let cue = (self.cue_row as f64 + CUE as f64 / 2.0, self.cue_col as f64 + CUE as f64 / 2.0);
        let half = self.region_side as f64 / 2.0;
        let reg = (self.region_row as f64 + half, self.region_col as f64 + half);
        ((cue.0 - reg.0).powi(2) + (cue.1 - reg.1).powi(2)).sqrt()
    }
}

fn level(v: u8) -> f64 {
    v as f64 / 255.0
}

fn longrange_pair(rng: &mut ChaCha8Rng, size: usize, ids: [String; 2]) -> [LabeledSample; 2] {
    let layout = LongRangeLayout::new(size, rng.gen_range(0..4));
    let mut base = vec![0u8; size * size];
    for v in base.iter_mut() {
        *v = 128 + rng.gen_range(0..=16) - 8;
    }
    // binary texture on 2×2 cells
    let side = layout.region_side;
    let cells = side.div_ceil(2);
    let tex: Vec<bool> = (0..cells * cells).map(|_| rng.gen()).collect();
    for r in 0..side {
        for c in 0..side {
            let on = tex[(r / 2) * cells + c / 2];
            base[(layout.region_row + r) * size + layout.region_col + c] = if on { 192 } else { 64 };
        }
    }
    let first: u8 = if rng.gen() { 1 } else { 2 };
    let [id0, id1] = ids;
    [(first, id0), (3 - first, id1)].map(|(class, id)| {
        let mut px = base.clone();
        for r in 0..CUE {
            for c in 0..CUE {
                let stripe = if class == 1 { r % 2 == 0 } else { c % 2 == 0 };
                px[(layout.cue_row + r) * size + layout.cue_col + c] = if stripe { 255 } else { 0 };
            }
        }
        let labels = (0..size * size)
            .map(|i| if layout.in_region(i / size, i % size) { class } else { 0 })
            .collect();
        LabeledSample {
            id,
            image: FeatureMap::new(size, size, 1, px.into_iter().map(level).collect()).expect("sized"),
            labels,
        }
    })
}

/// Square of `side` at `(r, c)`, keeping one pixel of clearance.
fn free(occupied: &[bool], size: usize, r: usize, c: usize, side: usize) -> bool {
    let r0 = r.saturating_sub(1);
    let c0 = c.saturating_sub(1);
    let r1 = (r + side + 1).min(size);
    let c1 = (c + side + 1).min(size);
    (r0..r1).all(|y| (c0..c1).all(|x| !occupied[y * size + x]))
}

fn multiscale_sample(rng: &mut ChaCha8Rng, size: usize, id: String) -> LabeledSample {
    let mut px: Vec<u8> = (0..size * size).map(|_| 64 + rng.gen_range(0..=16) - 8).collect();
    let mut labels = vec![0u8; size * size];
    let mut occupied = vec![false; size * size];
    // one blob of each octave first (largest first), then extras
    let mut wanted: Vec<u8> = vec![3, 2, 1];
    let extra = rng.gen_range(2..=4);
    wanted.extend((0..extra).map(|_| rng.gen_range(1..=3u8)));
    for class in wanted {
        let lo = 1usize << class;
        let side = rng.gen_range(lo..2 * lo).min(size - 2);
        for _ in 0..64 {
            let r = rng.gen_range(0..=size - side);
            let c = rng.gen_range(0..=size - side);
            if free(&occupied, size, r, c, side) {
                for y in r..r + side {
                    for x in c..c + side {
                        let i = y * size + x;
                        occupied[i] = true;
                        labels[i] = class;
                        px[i] = 192 + rng.gen_range(0..=16) - 8;
                    }
                }
                break;
            }
        }
    }
    LabeledSample {
        id,
        image: FeatureMap::new(size, size, 1, px.into_iter().map(level).collect()).expect("sized"),
        labels,
    }
}

pub fn generate_synthetic(kind: SynthKind, count: usize, size: usize, seed: u64) -> Result<SyntheticSet> {
    if size < 24 || size % 8 != 0 {
        return Err(Error::Config(format!(
            "synthetic image size must be at least 24 and divisible by 8, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::Config("synthetic sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = |i: usize| format!("{}_{i:04}", kind.name());
    let samples = match kind {
        SynthKind::LongRange => {
            let mut out = Vec::with_capacity(count);
            for p in 0..count.div_ceil(2) {
                let pair = longrange_pair(&mut rng, size, [id(2 * p), id(2 * p + 1)]);
                out.extend(pair);
            }
            out.truncate(count);
            out
        }
        SynthKind::MultiScale => (0..count).map(|i| multiscale_sample(&mut rng, size, id(i))).collect(),
    };
    let (names, palette): (Vec<&str>, Vec<[u8; 3]>) = match kind {
        SynthKind::LongRange => (
            vec!["background", "horizontal-cue", "vertical-cue"],
            vec![[0, 0, 0], [230, 120, 40], [40, 120, 230]],
        ),
        SynthKind::MultiScale => (
            vec!["background", "small", "medium", "large"],
            vec![[0, 0, 0], [220, 60, 60], [60, 200, 60], [60, 60, 220]],
        ),
    };
    Ok(SyntheticSet {
        kind,
        classes: palette.len(),
        names: names.into_iter().map(String::from).collect(),
        palette,
        samples,
    })
}
