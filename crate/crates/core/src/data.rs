//! Synthetic paired audio-visual clips.
//!
//! Classes come in time-reversed pairs. Each class shows a striped patch
//! that moves in steps along one axis while its colour ramps between two
//! palette entries; the partner class plays the same clip backwards (the
//! opposite motion and colour ramp). Content changes once every `hold`
//! frames. The audio is a spectral band unique to the class, pulsed with
//! the same phase as the patch's starting position.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Container, NamedTensor};
use crate::tensor::Tensor;
use crate::{Error, Result};

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.2, 0.9],
    [0.15, 0.85, 0.2],
    [0.9, 0.85, 0.15],
    [0.85, 0.2, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.1],
    [0.45, 0.2, 0.6],
];
const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    /// Even, at most 8.
    pub num_classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub freq: usize,
    pub audio_frames: usize,
    /// Frames each motion/colour step is held for.
    pub hold: usize,
    pub patch: usize,
    /// Pixels moved per step.
    pub step: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            num_classes: 4,
            per_class: 50,
            frames: 8,
            height: 56,
            width: 56,
            freq: 32,
            audio_frames: 32,
            hold: 2,
            patch: 24,
            step: 6,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || !self.num_classes.is_multiple_of(2) || self.num_classes > PALETTE.len() {
            return bad(format!(
                "data.classes must be even and in 2..=8, got {}",
                self.num_classes
            ));
        }
        if self.per_class == 0 || self.frames == 0 || self.freq == 0 || self.audio_frames == 0 {
            return bad("data sizes must be positive".into());
        }
        if self.hold == 0 || !self.frames.is_multiple_of(self.hold) {
            return bad(format!(
                "data.hold {} must divide data.frames {}",
                self.hold, self.frames
            ));
        }
        if self.patch == 0 || self.patch + self.travel() > self.height.min(self.width) {
            return bad(format!(
                "data.patch {} plus travel {} exceeds the {}x{} frame",
                self.patch,
                self.travel(),
                self.height,
                self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("data.noise {} not in [0, 1]", self.noise));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.frames / self.hold
    }

    /// Total displacement of the patch over a clip.
    pub fn travel(&self) -> usize {
        self.step * (self.steps().max(1) - 1)
    }

    pub fn total(&self) -> usize {
        self.num_classes * self.per_class
    }
}

/// One clip: `video` is `[3, T, H, W]`, `audio` `[1, F, T_a]`, both in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct AVInstance {
    pub video: Tensor,
    pub audio: Tensor,
    pub class_id: usize,
    pub instance_id: u64,
}

/// The random choices behind one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceParams {
    /// Start of the patch along the motion axis, `0..=H - patch - travel`,
    /// measured from the end the patch moves away from.
    pub phase: usize,
    /// Offset across the motion axis.
    pub cross: usize,
}

impl InstanceParams {
    pub fn sample<R: Rng>(spec: &SyntheticDatasetSpec, rng: &mut R) -> Self {
        let free = spec.height.min(spec.width) - spec.patch;
        InstanceParams {
            phase: rng.random_range(0..=free - spec.travel()),
            cross: rng.random_range(0..=free),
        }
    }
}

/// Forward classes (even ids) move towards larger coordinates; their odd
/// partners are the exact reversal.
struct Motion {
    vertical: bool,
    reversed: bool,
    from: [f64; 3],
    to: [f64; 3],
}

fn motion(class_id: usize) -> Motion {
    let pair = class_id / 2;
    Motion {
        vertical: pair.is_multiple_of(2),
        reversed: class_id % 2 == 1,
        from: PALETTE[2 * pair],
        to: PALETTE[2 * pair + 1],
    }
}

/// Noise-free video, per step: (patch position along the axis, colour).
fn schedule(spec: &SyntheticDatasetSpec, class_id: usize, p: InstanceParams) -> Vec<(usize, [f64; 3])> {
    let m = motion(class_id);
    let steps = spec.steps();
    let mut out: Vec<_> = (0..steps)
        .map(|k| {
            let a = if steps == 1 { 0.0 } else { k as f64 / (steps - 1) as f64 };
            let colour = [0, 1, 2].map(|c| m.from[c] + (m.to[c] - m.from[c]) * a);
            (p.phase + k * spec.step, colour)
        })
        .collect();
    if m.reversed {
        out.reverse();
    }
    out
}

fn stripe(i: usize, vertical_motion: bool, j: usize) -> f64 {
    // stripes run across the motion axis with a pair-specific period
    let along = if vertical_motion { i } else { j };
    let period = if vertical_motion { 6 } else { 4 };
    if (along / (period / 2)) % 2 == 0 {
        1.0
    } else {
        0.35
    }
}

/// Renders an instance from explicit parameters, with noise from `rng`.
pub fn render_instance<R: Rng>(
    spec: &SyntheticDatasetSpec,
    class_id: usize,
    p: InstanceParams,
    rng: &mut R,
) -> Result<AVInstance> {
    spec.validate()?;
    if class_id >= spec.num_classes {
        return Err(Error::Data(format!("class {class_id} not below {}", spec.num_classes)));
    }
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let m = motion(class_id);
    let plan = schedule(spec, class_id, p);
    let mut video = vec![BACKGROUND; 3 * t * h * w];
    for f in 0..t {
        let (pos, colour) = plan[f / spec.hold];
        let (y0, x0) = if m.vertical { (pos, p.cross) } else { (p.cross, pos) };
        for c in 0..3 {
            let frame = &mut video[(c * t + f) * h * w..][..h * w];
            for i in 0..spec.patch {
                for j in 0..spec.patch {
                    let s = stripe(i, m.vertical, j);
                    frame[(y0 + i) * w + x0 + j] = BACKGROUND + (colour[c] - BACKGROUND) * s;
                }
            }
        }
    }
    let free = spec.height.min(spec.width) - spec.patch - spec.travel();
    let phase = if free == 0 {
        0.0
    } else {
        p.phase as f64 / (free + 1) as f64
    };
    let (fq, ta) = (spec.freq, spec.audio_frames);
    let centre = (class_id as f64 + 0.5) * fq as f64 / spec.num_classes as f64;
    let width = fq as f64 / (4.0 * spec.num_classes as f64);
    let mut audio = vec![0.0; fq * ta];
    for fi in 0..fq {
        let profile = (-((fi as f64 - centre) / width).powi(2) / 2.0).exp();
        for ti in 0..ta {
            let pulse = 0.6 + 0.4 * (std::f64::consts::TAU * (ti as f64 / 8.0 + phase)).cos();
            audio[fi * ta + ti] = 0.05 + 0.85 * profile * pulse;
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("noise in [0, 1]");
        for v in video.iter_mut().chain(audio.iter_mut()) {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(AVInstance {
        video: Tensor::from_vec(video, &[3, t, h, w])?,
        audio: Tensor::from_vec(audio, &[1, fq, ta])?,
        class_id,
        instance_id: 0,
    })
}

/// Draws parameters then renders.
pub fn generate_instance<R: Rng>(spec: &SyntheticDatasetSpec, class_id: usize, rng: &mut R) -> Result<AVInstance> {
    let p = InstanceParams::sample(spec, rng);
    render_instance(spec, class_id, p, rng)
}

/// Reverses a `[C, T, H, W]` clip in time.
pub fn reverse_time(video: &Tensor) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::Data(format!("expected [C, T, H, W], got {s:?}")));
    }
    let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
    let src = video.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for ti in (0..t).rev() {
            out.extend_from_slice(&src[(ci * t + ti) * hw..][..hw]);
        }
    }
    Ok(Tensor::from_vec(out, s)?)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for instance `id`, independent of generation order.
pub fn instance_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub train: Vec<AVInstance>,
    pub test: Vec<AVInstance>,
}

/// Generates `per_class` instances of every class and holds out the
/// 20% of each class with the smallest id hash.
pub fn build_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let held = spec.per_class / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.num_classes {
        let mut ids: Vec<u64> = (0..spec.per_class).map(|i| (c * spec.per_class + i) as u64).collect();
        ids.sort_by_key(|&id| (mix(spec.seed ^ mix(id)), id));
        let mut items = Vec::with_capacity(ids.len());
        for (rank, &id) in ids.iter().enumerate() {
            let mut inst = generate_instance(spec, c, &mut instance_rng(spec.seed, id))?;
            inst.instance_id = id;
            items.push((rank < held, inst));
        }
        items.sort_by_key(|(_, inst)| inst.instance_id);
        for (is_test, inst) in items {
            if is_test {
                test.push(inst);
            } else {
                train.push(inst);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

/// One epoch of shuffled index batches; the last partial batch is dropped.
pub fn iterate_batches<R: Rng>(len: usize, batch: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > len {
        return Err(Error::Data(format!("batch size {batch} not in 1..={len}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    // Fisher-Yates with the caller's generator keeps epochs reproducible
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks_exact(batch).map(|c| c.to_vec()).collect())
}

/// Writes instances as a tensor container: `video.<id>`, `audio.<id>` and a
/// `labels` tensor of `(instance_id, class_id)` rows.
pub fn export(instances: &[AVInstance], path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(2 * instances.len() + 1);
    let mut labels = Vec::with_capacity(2 * instances.len());
    for inst in instances {
        let id = inst.instance_id;
        tensors.push(NamedTensor::from_f64(
            format!("video.{id}"),
            inst.video.shape(),
            &inst.video.data(),
        ));
        tensors.push(NamedTensor::from_f64(
            format!("audio.{id}"),
            inst.audio.shape(),
            &inst.audio.data(),
        ));
        labels.extend([id as f64, inst.class_id as f64]);
    }
    if !instances.is_empty() {
        tensors.push(NamedTensor::from_f64("labels", &[instances.len(), 2], &labels));
    }
    Container::new(tensors).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            per_class: 10,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let spec = small();
        let a = generate_instance(&spec, 1, &mut instance_rng(3, 9)).unwrap();
        let b = generate_instance(&spec, 1, &mut instance_rng(3, 9)).unwrap();
        assert_eq!(a.video.to_vec(), b.video.to_vec());
        assert_eq!(a.audio.to_vec(), b.audio.to_vec());
    }

    #[test]
    fn pixel_range() {
        let spec = SyntheticDatasetSpec { noise: 0.3, ..small() };
        let mut rng = instance_rng(1, 0);
        for k in 0..1000 {
            let inst = generate_instance(&spec, k % 4, &mut rng).unwrap();
            assert!(inst.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(inst.audio.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_class_equal_up_to_phase_shift() {
        let spec = SyntheticDatasetSpec { noise: 0.0, ..small() };
        let mut rng = instance_rng(0, 0);
        for class in 0..4 {
            let p1 = InstanceParams { phase: 2, cross: 10 };
            let p2 = InstanceParams { phase: 7, cross: 10 };
            let a = render_instance(&spec, class, p1, &mut rng).unwrap().video.to_vec();
            let b = render_instance(&spec, class, p2, &mut rng).unwrap().video.to_vec();
            let (h, w) = (spec.height, spec.width);
            let vertical = motion(class).vertical;
            // shift a by 5 pixels along the motion axis and compare
            for ct in 0..3 * spec.frames {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = if vertical {
                            (y as isize - 5, x as isize)
                        } else {
                            (y as isize, x as isize - 5)
                        };
                        let va = if sy < 0 || sx < 0 {
                            BACKGROUND
                        } else {
                            a[ct * h * w + sy as usize * w + sx as usize]
                        };
                        assert_eq!(va, b[ct * h * w + y * w + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn partner_class_is_time_reversal() {
        let spec = SyntheticDatasetSpec { noise: 0.0, ..small() };
        let mut rng = instance_rng(0, 0);
        let p = InstanceParams { phase: 4, cross: 3 };
        for pair in 0..2 {
            let fwd = render_instance(&spec, 2 * pair, p, &mut rng).unwrap();
            let back = render_instance(&spec, 2 * pair + 1, p, &mut rng).unwrap();
            assert_eq!(reverse_time(&fwd.video).unwrap().to_vec(), back.video.to_vec());
            assert_ne!(fwd.video.to_vec(), back.video.to_vec());
        }
    }

    /// Nearest class centroid over the given feature.
    fn centroid_accuracy(insts: &[AVInstance], classes: usize, feature: impl Fn(&AVInstance) -> Vec<f64>) -> f64 {
        let feats: Vec<Vec<f64>> = insts.iter().map(&feature).collect();
        let d = feats[0].len();
        let mut centroids = vec![vec![0.0; d]; classes];
        let mut counts = vec![0.0; classes];
        for (f, inst) in feats.iter().zip(insts) {
            counts[inst.class_id] += 1.0;
            for k in 0..d {
                centroids[inst.class_id][k] += f[k];
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let hits = feats
            .iter()
            .zip(insts)
            .filter(|(f, inst)| {
                let dist = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..classes)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == inst.class_id
            })
            .count();
        hits as f64 / insts.len() as f64
    }

    #[test]
    fn class_decodable_from_each_modality() {
        let spec = SyntheticDatasetSpec { noise: 0.0, ..small() };
        let ds = build_dataset(&spec).unwrap();
        let all: Vec<AVInstance> = ds.train.iter().chain(&ds.test).cloned().collect();
        let frame_means = |inst: &AVInstance| {
            let hw = spec.height * spec.width;
            inst.video
                .data()
                .chunks(hw)
                .map(|f| f.iter().sum::<f64>() / hw as f64)
                .collect()
        };
        assert!(centroid_accuracy(&all, 4, frame_means) >= 0.9);
        let band_energy = |inst: &AVInstance| {
            inst.audio
                .data()
                .chunks(spec.audio_frames)
                .map(|r| r.iter().sum())
                .collect()
        };
        assert!(centroid_accuracy(&all, 4, band_energy) >= 0.9);
        // per-clip channel means ignore time order, so partners collide
        let clip_means = |inst: &AVInstance| {
            let n = spec.frames * spec.height * spec.width;
            // rounded so summation order cannot break the tie between partners
            inst.video
                .data()
                .chunks(n)
                .map(|c| (c.iter().sum::<f64>() / n as f64 * 1e9).round())
                .collect()
        };
        assert!(centroid_accuracy(&all, 4, clip_means) <= 0.75);
    }

    #[test]
    fn split_is_balanced_disjoint_and_stable() {
        let spec = SyntheticDatasetSpec::default();
        let ds = build_dataset(&SyntheticDatasetSpec {
            per_class: 50,
            ..spec.clone()
        })
        .unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (160, 40));
        for c in 0..4 {
            assert_eq!(ds.test.iter().filter(|i| i.class_id == c).count(), 10);
        }
        let train: std::collections::HashSet<u64> = ds.train.iter().map(|i| i.instance_id).collect();
        assert!(ds.test.iter().all(|i| !train.contains(&i.instance_id)));
        let again = build_dataset(&spec).unwrap();
        let ids = |v: &[AVInstance]| v.iter().map(|i| i.instance_id).collect::<Vec<_>>();
        assert_eq!(ids(&ds.test), ids(&again.test));
        assert_eq!(ds.test[3].video.to_vec(), again.test[3].video.to_vec());
    }

    #[test]
    fn batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e1 = iterate_batches(160, 8, &mut rng).unwrap();
        assert_eq!(e1.len(), 20);
        let mut seen: Vec<usize> = e1.concat();
        seen.sort();
        assert_eq!(seen, (0..160).collect::<Vec<_>>());
        let e2 = iterate_batches(160, 8, &mut rng).unwrap();
        assert_ne!(e1, e2);
        let partial = iterate_batches(10, 4, &mut rng).unwrap();
        assert_eq!(partial.len(), 2);
        assert!(iterate_batches(10, 0, &mut rng).is_err());
    }

    #[test]
    fn export_roundtrip() {
        let spec = SyntheticDatasetSpec {
            height: 32,
            width: 32,
            patch: 12,
            step: 4,
            ..small()
        };
        let mut inst = generate_instance(&spec, 2, &mut instance_rng(0, 5)).unwrap();
        inst.instance_id = 5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.stca");
        export(&[inst.clone()], &path).unwrap();
        let c = Container::read(&path).unwrap();
        assert_eq!(c.get("video.5").unwrap().shape, vec![3, 8, 32, 32]);
        assert_eq!(c.get("labels").unwrap().to_f64(), vec![5.0, 2.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticDatasetSpec {
            num_classes: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticDatasetSpec { patch: 50, ..small() }.validate().is_err());
        assert!(SyntheticDatasetSpec { hold: 3, ..small() }.validate().is_err());
    }
}
