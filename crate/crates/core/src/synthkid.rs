//! Deterministic kidney phantoms.
//!
//! Each case is built as a tissue map (air, body, liver, muscle, distractor
//! organs, two kidneys) and then rendered into an FA-like channel, where the
//! kidneys form the lowest band, and an MD-like channel, where the kidneys
//! and the distractor organs share one intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{linear_index, Dims, LabelVolume, Volume3};

/// Stateless 64-bit mixer (splitmix64 finalizer over `seed + index * golden`).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub n_subjects: u32,
    pub timepoints_per_subject: u32,
    /// Inclusive range for the truth voxel count of a case (both kidneys).
    pub kidney_volume_range: (usize, usize),
    /// Noise standard deviation as a fraction of each channel's kidney contrast.
    pub noise_sigma: f32,
    /// Amplitude of a smooth intensity drift within each tissue band, as a
    /// fraction of the kidney contrast.
    pub texture: f32,
    /// Inclusive range for the number of MD look-alike organs.
    pub distractor_count: (u32, u32),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [110, 110, 15],
            spacing: [0.2, 0.2, 1.0],
            n_subjects: 15,
            timepoints_per_subject: 4,
            kidney_volume_range: (2000, 9000),
            noise_sigma: 0.1,
            texture: 0.1,
            distractor_count: (3, 5),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if nx < 24 || ny < 24 || nz < 3 {
            return Err(Error::Spec(format!("dims {:?} too small for two kidneys", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Spec("spacing must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec("noise sigma must be finite and non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.texture) {
            return Err(Error::Spec("texture must lie in [0, 0.5)".into()));
        }
        let (lo, hi) = self.kidney_volume_range;
        if lo < 2 || lo > hi {
            return Err(Error::Spec(format!("kidney volume range ({lo}, {hi}) is empty")));
        }
        if self.distractor_count.0 < 1 || self.distractor_count.0 > self.distractor_count.1 {
            return Err(Error::Spec("distractor count range must start at >= 1".into()));
        }
        if self.n_subjects == 0 || self.timepoints_per_subject == 0 {
            return Err(Error::Spec("need at least one subject and timepoint".into()));
        }
        let (min_vol, max_vol) = self.attainable_kidney_volume();
        if lo as f64 > max_vol || (hi as f64) < min_vol {
            return Err(Error::Spec(format!(
                "kidney volume range ({lo}, {hi}) outside the attainable {min_vol:.0}..{max_vol:.0} voxels"
            )));
        }
        Ok(())
    }

    /// Loose bounds on the two-kidney voxel count the generator can produce.
    fn attainable_kidney_volume(&self) -> (f64, f64) {
        let f = (self.dims[0].min(self.dims[1]) as f64 / 110.0).min(1.0);
        let nz = self.dims[2] as f64;
        let grow = 1.0 + 0.05 * (self.timepoints_per_subject - 1) as f64;
        let ball = |a: f64, b: f64, c: f64| 4.0 / 3.0 * std::f64::consts::PI * a * b * c;
        let lo = 2.0 * ball(9.0 * f, 6.0 * f, 0.28 * nz) * 0.5;
        let hi = 2.0 * ball(12.5 * f * grow, 8.5 * f * grow, 0.36 * nz) * 1.5;
        (lo, hi)
    }

    pub fn case_count(&self) -> usize {
        (self.n_subjects * self.timepoints_per_subject) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Air = 0,
    Body = 1,
    Liver = 2,
    Muscle = 3,
    Distractor = 4,
    Kidney = 5,
}

pub const TISSUES: [Tissue; 6] = [
    Tissue::Air,
    Tissue::Body,
    Tissue::Liver,
    Tissue::Muscle,
    Tissue::Distractor,
    Tissue::Kidney,
];

/// Noiseless intensity per tissue, indexed by `Tissue as usize`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandTable(pub [f32; 6]);

impl BandTable {
    /// Fractional-anisotropy-like contrast: kidney cortex is the lowest band.
    pub const FA: BandTable = BandTable([0.85, 0.30, 0.42, 0.70, 0.55, 0.12]);
    /// Mean-diffusivity-like contrast: distractor organs mimic the kidney.
    pub const MD: BandTable = BandTable([0.05, 0.80, 1.00, 0.60, 1.60, 1.60]);
    /// A different contrast used as the histogram-matching reference.
    pub const REFERENCE: BandTable = BandTable([0.02, 0.50, 0.30, 0.25, 0.90, 1.10]);

    pub fn of(&self, t: Tissue) -> f32 {
        self.0[t as usize]
    }

    /// Distance from the kidney band to the closest band of another value.
    pub fn kidney_contrast(&self) -> f32 {
        let k = self.of(Tissue::Kidney);
        self.0
            .iter()
            .map(|&v| (v - k).abs())
            .filter(|&d| d > 0.0)
            .fold(f32::INFINITY, f32::min)
    }
}

/// Tissue map of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub dims: Dims,
    pub tissue: Vec<Tissue>,
}

impl Anatomy {
    /// Band value per tissue, plus a smooth low-frequency drift of relative
    /// amplitude `texture` and white noise of relative sigma `noise_sigma`.
    pub fn render(&self, bands: &BandTable, noise_sigma: f32, texture: f32, spacing: [f32; 3], seed: u64) -> Volume3 {
        let contrast = bands.kidney_contrast();
        let sigma = noise_sigma * contrast;
        let amp = texture * contrast;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: [f32; 3] = std::array::from_fn(|_| rng.gen::<f32>() * std::f32::consts::TAU);
        let [nx, ny, nz] = self.dims;
        let period = [nx as f32 * 0.6, ny as f32 * 0.6, nz as f32 * 1.5];
        let wave = |axis: usize, i: usize| (std::f32::consts::TAU * i as f32 / period[axis] + phase[axis]).cos();
        let noise = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
        let mut data = Vec::with_capacity(self.tissue.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let t = self.tissue[linear_index(self.dims, x, y, z)];
                    let drift = amp * (wave(0, x) + wave(1, y) + wave(2, z)) / 3.0;
                    let mut v = bands.of(t) + drift;
                    if sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v);
                }
            }
        }
        Volume3::new(self.dims, spacing, data).expect("rendered volume is finite")
    }

    pub fn truth(&self, spacing: [f32; 3]) -> LabelVolume {
        LabelVolume::from_mask(self.dims, spacing, self.tissue.iter().map(|&t| t == Tissue::Kidney))
            .expect("binary mask")
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub subject: u32,
    pub timepoint: u32,
    pub fa: Volume3,
    pub md: Volume3,
    pub truth: LabelVolume,
}

impl PhantomCase {
    pub fn id(&self) -> String {
        case_id(self.subject, self.timepoint)
    }
}

pub fn case_id(subject: u32, timepoint: u32) -> String {
    format!("s{subject:02}_t{timepoint}")
}

/// Ellipsoid with an in-plane rotation, in voxel units.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let (dx, dy, dz) = (
            x as f64 - self.center[0],
            y as f64 - self.center[1],
            z as f64 - self.center[2],
        );
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) + (dz / self.axes[2]).powi(2) <= 1.0
    }

    /// Conservative voxel bounding box, or `None` if it leaves the grid.
    fn bounds(&self, dims: Dims) -> Option<[(usize, usize); 3]> {
        let r = self.axes[0].max(self.axes[1]);
        let ext = [r, r, self.axes[2]];
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let lo = (self.center[a] - ext[a]).floor();
            let hi = (self.center[a] + ext[a]).ceil();
            if lo < 0.0 || hi > (dims[a] - 1) as f64 {
                return None;
            }
            out[a] = (lo as usize, hi as usize);
        }
        Some(out)
    }

    fn voxels(&self, dims: Dims) -> Option<Vec<usize>> {
        let b = self.bounds(dims)?;
        let mut out = Vec::new();
        for z in b[2].0..=b[2].1 {
            for y in b[1].0..=b[1].1 {
                for x in b[0].0..=b[0].1 {
                    if self.contains(x, y, z) {
                        out.push(linear_index(dims, x, y, z));
                    }
                }
            }
        }
        Some(out)
    }
}

/// Geometry shared by all timepoints of one subject.
#[derive(Debug, Clone)]
struct SubjectPlan {
    kidneys: [Ellipsoid; 2],
    /// Per-timepoint relative kidney growth (disease group grows).
    growth: f64,
}

const MAX_ATTEMPTS: usize = 400;
const SUBJECT_ATTEMPTS: usize = 40;
const TIMEPOINT_ATTEMPTS: usize = 25;

fn plan_subject(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> SubjectPlan {
    let [nx, ny, nz] = spec.dims.map(|d| d as f64);
    let sx = nx / 110.0;
    let sy = ny / 110.0;
    let zc = (nz - 1.0) / 2.0;
    // the pair sits anywhere the body leaves room for it
    let (px, py) = (rng.gen_range(-8.0..8.0) * sx, rng.gen_range(-24.0..22.0) * sy);
    let mut make = |side: f64| Ellipsoid {
        center: [
            nx / 2.0 + px + side * rng.gen_range(20.0..25.0) * sx,
            ny / 2.0 + py + rng.gen_range(-2.5..2.5) * sy,
            zc + rng.gen_range(-0.6..0.6),
        ],
        axes: [
            rng.gen_range(9.0..12.5) * sy.min(sx),
            rng.gen_range(6.0..8.5) * sy.min(sx),
            rng.gen_range(0.28..0.36) * nz,
        ],
        angle: (rng.gen_range(-25.0..25.0) - side * 15.0f64).to_radians() + std::f64::consts::FRAC_PI_2,
    };
    let kidneys = [make(-1.0), make(1.0)];
    SubjectPlan {
        kidneys,
        growth: if rng.gen_bool(0.5) {
            rng.gen_range(0.02..0.05)
        } else {
            0.0
        },
    }
}

fn body_contains(dims: Dims, x: usize, y: usize) -> bool {
    let (cx, cy) = ((dims[0] as f64 - 1.0) / 2.0, (dims[1] as f64 - 1.0) / 2.0);
    let (rx, ry) = (0.42 * dims[0] as f64, 0.36 * dims[1] as f64);
    ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0
}

/// Build the tissue map of one timepoint, or `None` when the sampled
/// geometry is infeasible (caller resamples).
fn build_anatomy(spec: &PhantomSpec, plan: &SubjectPlan, timepoint: u32, rng: &mut ChaCha8Rng) -> Option<Anatomy> {
    let dims = spec.dims;
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut tissue = vec![Tissue::Air; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if body_contains(dims, x, y) {
                    tissue[linear_index(dims, x, y, z)] = Tissue::Body;
                }
            }
        }
    }
    let fx = nx as f64 / 110.0;
    let fy = ny as f64 / 110.0;
    let liver = Ellipsoid {
        center: [
            nx as f64 * 0.35 + rng.gen_range(-3.0..3.0) * fx,
            ny as f64 * 0.36,
            (nz as f64 - 1.0) / 2.0,
        ],
        axes: [22.0 * fx.min(fy), 12.0 * fx.min(fy), nz as f64],
        angle: rng.gen_range(-0.3..0.3),
    };
    let spine = Ellipsoid {
        center: [(nx as f64 - 1.0) / 2.0, ny as f64 * 0.72, (nz as f64 - 1.0) / 2.0],
        axes: [6.0 * fx.min(fy), 6.0 * fx.min(fy), nz as f64],
        angle: 0.0,
    };
    paint_clipped(&mut tissue, dims, &liver, Tissue::Liver);
    paint_clipped(&mut tissue, dims, &spine, Tissue::Muscle);

    let scale = 1.0 + plan.growth * timepoint as f64;
    let mut kidney_voxels = Vec::new();
    let mut kidney_box = [usize::MAX, 0, usize::MAX, 0];
    let (lo, hi) = spec.kidney_volume_range;
    for k in &plan.kidneys {
        let k = Ellipsoid {
            center: [
                k.center[0] + rng.gen_range(-1.5..1.5),
                k.center[1] + rng.gen_range(-1.5..1.5),
                k.center[2],
            ],
            axes: [k.axes[0] * scale, k.axes[1] * scale, k.axes[2]],
            angle: k.angle + rng.gen_range(-0.05..0.05),
        };
        let vox = k.voxels(dims)?;
        for &i in &vox {
            let (x, y) = (i % nx, (i / nx) % ny);
            if !body_contains(dims, x, y) || tissue[i] == Tissue::Muscle {
                return None;
            }
            kidney_box = [
                kidney_box[0].min(x),
                kidney_box[1].max(x),
                kidney_box[2].min(y),
                kidney_box[3].max(y),
            ];
        }
        kidney_voxels.push(vox);
    }
    let total: usize = kidney_voxels.iter().map(Vec::len).sum();
    if total < lo || total > hi {
        return None;
    }
    // Kidneys must be separate objects.
    let first: std::collections::HashSet<usize> = kidney_voxels[0].iter().copied().collect();
    if kidney_voxels[1].iter().any(|i| {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        neighbors6(dims, x, y, z).any(|j| first.contains(&j)) || first.contains(i)
    }) {
        return None;
    }

    // Distractors: kidney-sized look-alikes kept clear of the kidney region,
    // placed side by side in pairs like the kidneys while room allows.
    let keep_out = ((8.0 * fx.min(fy)).round() as usize).max(2);
    let count = rng.gen_range(spec.distractor_count.0..=spec.distractor_count.1) as usize;
    let mut placed = 0;
    let mut taken: Vec<[usize; 4]> = Vec::new();
    for attempt in 0..MAX_ATTEMPTS {
        if placed == count {
            break;
        }
        let pair = count - placed >= 2 && attempt < MAX_ATTEMPTS / 2;
        let center = [
            rng.gen_range(0.15..0.85) * nx as f64,
            rng.gen_range(0.14..0.86) * ny as f64,
            (nz as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0),
        ];
        let sides: &[f64] = if pair { &[-1.0, 1.0] } else { &[0.0] };
        let mut blobs = Vec::with_capacity(sides.len());
        for &side in sides {
            let d = Ellipsoid {
                center: [
                    center[0] + side * rng.gen_range(20.0..25.0) * fx,
                    center[1] + rng.gen_range(-2.5..2.5) * fy,
                    center[2],
                ],
                axes: [
                    rng.gen_range(9.0..12.5) * fx.min(fy),
                    rng.gen_range(6.0..8.5) * fx.min(fy),
                    rng.gen_range(0.28..0.36) * nz as f64,
                ],
                angle: (rng.gen_range(-25.0f64..25.0) - side * 15.0).to_radians() + std::f64::consts::FRAC_PI_2,
            };
            blobs.push(d.voxels(dims));
        }
        let Some(blobs) = blobs.into_iter().collect::<Option<Vec<_>>>() else {
            continue;
        };
        let boxes: Vec<[usize; 4]> = blobs.iter().map(|b| footprint(b, nx, ny)).collect();
        let apart =
            |a: &[usize; 4], b: &[usize; 4]| a[1] + 2 < b[0] || b[1] + 2 < a[0] || a[3] + 2 < b[2] || b[3] + 2 < a[2];
        let clear = blobs.iter().flatten().all(|&i| {
            let (x, y) = (i % nx, (i / nx) % ny);
            let near_kidney = x + keep_out >= kidney_box[0]
                && x <= kidney_box[1] + keep_out
                && y + keep_out >= kidney_box[2]
                && y <= kidney_box[3] + keep_out;
            body_contains(dims, x, y) && !near_kidney && tissue[i] != Tissue::Muscle
        }) && boxes.iter().all(|b| taken.iter().all(|t| apart(b, t)))
            && (boxes.len() < 2 || apart(&boxes[0], &boxes[1]));
        if !clear {
            continue;
        }
        for i in blobs.iter().flatten() {
            tissue[*i] = Tissue::Distractor;
        }
        placed += blobs.len();
        taken.extend(boxes);
    }
    if placed < count {
        return None;
    }
    for vox in kidney_voxels {
        for i in vox {
            tissue[i] = Tissue::Kidney;
        }
    }
    Some(Anatomy { dims, tissue })
}

/// In-plane `[x0, x1, y0, y1]` extent of a voxel list.
fn footprint(voxels: &[usize], nx: usize, ny: usize) -> [usize; 4] {
    voxels.iter().fold([usize::MAX, 0, usize::MAX, 0], |b, &i| {
        let (x, y) = (i % nx, (i / nx) % ny);
        [b[0].min(x), b[1].max(x), b[2].min(y), b[3].max(y)]
    })
}

fn paint_clipped(tissue: &mut [Tissue], dims: Dims, e: &Ellipsoid, t: Tissue) {
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if body_contains(dims, x, y) && e.contains(x, y, z) {
                    tissue[linear_index(dims, x, y, z)] = t;
                }
            }
        }
    }
}

/// In-grid 6-neighbours of (x, y, z) as flat indices.
pub fn neighbors6(dims: Dims, x: usize, y: usize, z: usize) -> impl Iterator<Item = usize> {
    const STEPS: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
    STEPS.into_iter().filter_map(move |(dx, dy, dz)| {
        let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
        if a < 0 || b < 0 || c < 0 || a >= dims[0] as isize || b >= dims[1] as isize || c >= dims[2] as isize {
            None
        } else {
            Some(linear_index(dims, a as usize, b as usize, c as usize))
        }
    })
}

fn subject_cases(spec: &PhantomSpec, subject: u32, noise_sigma: f32) -> Result<Vec<(Anatomy, PhantomCase)>> {
    let subject_seed = mix_seed(spec.seed, subject as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    for _ in 0..SUBJECT_ATTEMPTS {
        let plan = plan_subject(spec, &mut rng);
        let mut cases = Vec::with_capacity(spec.timepoints_per_subject as usize);
        for tp in 0..spec.timepoints_per_subject {
            let tp_seed = mix_seed(subject_seed, tp as u64 + 1);
            let mut tp_rng = ChaCha8Rng::seed_from_u64(tp_seed);
            let Some(anatomy) = (0..TIMEPOINT_ATTEMPTS).find_map(|_| build_anatomy(spec, &plan, tp, &mut tp_rng))
            else {
                break;
            };
            let fa = anatomy.render(
                &BandTable::FA,
                noise_sigma,
                spec.texture,
                spec.spacing,
                mix_seed(tp_seed, 101),
            );
            let md = anatomy.render(
                &BandTable::MD,
                noise_sigma,
                spec.texture,
                spec.spacing,
                mix_seed(tp_seed, 202),
            );
            let truth = anatomy.truth(spec.spacing);
            cases.push((
                anatomy,
                PhantomCase {
                    subject,
                    timepoint: tp,
                    fa,
                    md,
                    truth,
                },
            ));
        }
        if cases.len() == spec.timepoints_per_subject as usize {
            return Ok(cases);
        }
    }
    Err(Error::Spec(format!(
        "could not fit kidneys of {:?} voxels into a {:?} grid for subject {subject}",
        spec.kidney_volume_range, spec.dims
    )))
}

/// Generate every (subject, timepoint) case. Subjects are generated in
/// parallel from per-subject derived seeds, so the output does not depend on
/// the thread count.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<PhantomCase>> {
    Ok(generate_with_anatomy(spec)?.into_iter().map(|(_, c)| c).collect())
}

/// [`generate`] plus the tissue map behind each case.
pub fn generate_with_anatomy(spec: &PhantomSpec) -> Result<Vec<(Anatomy, PhantomCase)>> {
    spec.validate()?;
    let per_subject: Vec<Result<Vec<(Anatomy, PhantomCase)>>> = (0..spec.n_subjects)
        .into_par_iter()
        .map(|s| subject_cases(spec, s, spec.noise_sigma))
        .collect();
    let mut out = Vec::with_capacity(spec.case_count());
    for r in per_subject {
        out.extend(r?);
    }
    Ok(out)
}

/// A phantom rendered in the reference contrast, used as the histogram
/// matching target.
pub fn reference_volume(spec: &PhantomSpec) -> Result<Volume3> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX - 1));
    for _ in 0..SUBJECT_ATTEMPTS {
        let plan = plan_subject(spec, &mut rng);
        if let Some(a) = build_anatomy(spec, &plan, 0, &mut rng) {
            return Ok(a.render(
                &BandTable::REFERENCE,
                spec.noise_sigma,
                spec.texture,
                spec.spacing,
                rng.gen(),
            ));
        }
    }
    Err(Error::Spec("could not build a reference phantom".into()))
}

/// Leave-one-subject-out partition. Holding out the only subject yields an
/// empty training half, reported through [`SubjectSplit::is_degenerate`].
#[derive(Debug)]
pub struct SubjectSplit<'a> {
    pub train: Vec<&'a PhantomCase>,
    pub test: Vec<&'a PhantomCase>,
}

impl SubjectSplit<'_> {
    pub fn is_degenerate(&self) -> bool {
        self.train.is_empty()
    }
}

pub fn split_by_subject(cases: &[PhantomCase], held_out: u32) -> Result<SubjectSplit<'_>> {
    let (test, train): (Vec<_>, Vec<_>) = cases.iter().partition(|c| c.subject == held_out);
    if test.is_empty() {
        return Err(Error::UnknownSubject(held_out));
    }
    Ok(SubjectSplit { train, test })
}
