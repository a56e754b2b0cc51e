//! Space-time tube crops in input and feature space, photometric jitter, and
//! the sampler that derives medium/small views from each large crop.

use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Input,
    Feature,
}

/// A spatial box held constant over a temporal window. Bounds are
/// max-exclusive cell indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropTube {
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub domain: Domain,
}

impl CropTube {
    /// Builds a tube and checks it against the `[T, H, W]` extents.
    pub fn new(
        t: (usize, usize),
        y: (usize, usize),
        x: (usize, usize),
        extents: [usize; 3],
        domain: Domain,
    ) -> Result<Self> {
        let tube = CropTube {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            t_min: t.0,
            t_max: t.1,
            domain,
        };
        tube.check(extents)?;
        Ok(tube)
    }

    pub fn full(extents: [usize; 3], domain: Domain) -> Self {
        CropTube {
            x_min: 0,
            x_max: extents[2],
            y_min: 0,
            y_max: extents[1],
            t_min: 0,
            t_max: extents[0],
            domain,
        }
    }

    pub fn check(&self, extents: [usize; 3]) -> Result<()> {
        let ok = self.t_min < self.t_max
            && self.t_max <= extents[0]
            && self.y_min < self.y_max
            && self.y_max <= extents[1]
            && self.x_min < self.x_max
            && self.x_max <= extents[2];
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!(
                "crop tube {self:?} outside extents {extents:?}"
            )))
        }
    }

    /// `[T', H', W']` of the tube.
    pub fn extents(&self) -> [usize; 3] {
        [
            self.t_max - self.t_min,
            self.y_max - self.y_min,
            self.x_max - self.x_min,
        ]
    }

    pub fn volume(&self) -> usize {
        self.extents().iter().product()
    }

    /// The input-space tube covering the same cells under an encoder with
    /// temporal stride `st` and spatial stride `s`.
    pub fn to_input(&self, st: usize, s: usize) -> CropTube {
        CropTube {
            x_min: self.x_min * s,
            x_max: self.x_max * s,
            y_min: self.y_min * s,
            y_max: self.y_max * s,
            t_min: self.t_min * st,
            t_max: self.t_max * st,
            domain: Domain::Input,
        }
    }

    /// `inner` is relative to this tube; returns the equivalent tube on the
    /// original grid.
    pub fn compose(&self, inner: &CropTube) -> Result<CropTube> {
        inner.check(self.extents())?;
        Ok(CropTube {
            x_min: self.x_min + inner.x_min,
            x_max: self.x_min + inner.x_max,
            y_min: self.y_min + inner.y_min,
            y_max: self.y_min + inner.y_max,
            t_min: self.t_min + inner.t_min,
            t_max: self.t_min + inner.t_max,
            domain: self.domain,
        })
    }

    fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        [self.t_min..self.t_max, self.y_min..self.y_max, self.x_min..self.x_max]
    }
}

/// Samples an input-space tube: a spatial box by area fraction then aspect
/// ratio (`w/h`, log-uniform), falling back to a central crop after ten
/// rejected draws, and a temporal window of `t_len` at a uniform offset.
pub fn sample_crop_tube<R: Rng>(
    extents: [usize; 3],
    area: (f64, f64),
    aspect: (f64, f64),
    t_len: usize,
    rng: &mut R,
) -> Result<CropTube> {
    let [t, h, w] = extents;
    if t_len == 0 || t_len > t {
        return Err(TensorError::Invalid(format!(
            "temporal crop length {t_len} not in 1..={t}"
        )));
    }
    if !(0.0 < area.0 && area.0 <= area.1 && area.1 <= 1.0 && 0.0 < aspect.0 && aspect.0 <= aspect.1) {
        return Err(TensorError::Invalid(format!(
            "crop ranges infeasible: area {area:?}, aspect {aspect:?}"
        )));
    }
    let full = (h * w) as f64;
    let (la, lb) = (aspect.0.ln(), aspect.1.ln());
    let mut boxed = None;
    for _ in 0..10 {
        let target = full * sample_range(rng, area);
        let ratio = sample_range(rng, (la, lb)).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let x0 = rng.random_range(0..=w - cw);
            let y0 = rng.random_range(0..=h - ch);
            boxed = Some((y0, ch, x0, cw));
            break;
        }
    }
    let (y0, ch, x0, cw) = boxed.unwrap_or_else(|| {
        // central crop of the whole frame, trimmed into the aspect range
        let frame = w as f64 / h as f64;
        let (cw, ch) = if frame < aspect.0 {
            (w, ((w as f64 / aspect.0).round() as usize).clamp(1, h))
        } else if frame > aspect.1 {
            (((h as f64 * aspect.1).round() as usize).clamp(1, w), h)
        } else {
            (w, h)
        };
        ((h - ch) / 2, ch, (w - cw) / 2, cw)
    });
    let t0 = rng.random_range(0..=t - t_len);
    CropTube::new((t0, t0 + t_len), (y0, y0 + ch), (x0, x0 + cw), extents, Domain::Input)
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn clip_dims(v: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match v.shape() {
        &[c, t, h, w] => Ok([c, t, h, w]),
        s => Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

/// Per-axis bilinear sampling taps with half-pixel centres.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Slices `tube` from a `[C, T, H, W]` clip and resizes every frame
/// bilinearly to `out = [H0, W0]`.
pub fn input_crop_resize(v: &Tensor, tube: &CropTube, out: [usize; 2]) -> Result<Tensor> {
    let [c, t, h, w] = clip_dims(v, "input_crop_resize")?;
    tube.check([t, h, w])?;
    let [h0, w0] = out;
    if h0 == 0 || w0 == 0 {
        return Err(TensorError::Invalid(format!("resize target {out:?} has an empty side")));
    }
    let [tt, th, tw] = tube.extents();
    let ys = taps(th, h0);
    let xs = taps(tw, w0);
    let src = v.data();
    let mut dst = Vec::with_capacity(c * tt * h0 * w0);
    for ci in 0..c {
        for ti in tube.t_min..tube.t_max {
            let frame = &src[(ci * t + ti) * h * w..][..h * w];
            let at = |y: usize, x: usize| frame[(tube.y_min + y) * w + tube.x_min + x];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let value = if fy == 0.0 && fx == 0.0 {
                        at(y0, x0)
                    } else {
                        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                        top * (1.0 - fy) + bottom * fy
                    };
                    dst.push(value);
                }
            }
        }
    }
    Tensor::from_vec(dst, &[c, tt, h0, w0])
}

/// Jitter strengths. All zeros is the identity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricParams {
    pub flip_prob: f64,
    /// Additive shift drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`, around the clip mean.
    pub contrast: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    /// Audio gain factor drawn from `1 ± audio_gain`.
    pub audio_gain: f64,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        PhotometricParams {
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            blur_prob: 0.2,
            blur_sigma: (0.1, 1.0),
            audio_gain: 0.2,
        }
    }
}

impl PhotometricParams {
    pub fn none() -> Self {
        PhotometricParams {
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            audio_gain: 0.0,
        }
    }
}

/// One clip's concrete jitter, shared by all of its frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricDraw {
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: Option<f64>,
}

impl PhotometricDraw {
    pub fn identity() -> Self {
        PhotometricDraw {
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: None,
        }
    }

    pub fn sample<R: Rng>(p: &PhotometricParams, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < p.flip_prob;
        let brightness = sample_range(rng, (-p.brightness, p.brightness));
        let contrast = 1.0 + sample_range(rng, (-p.contrast, p.contrast));
        let blur = rng.random::<f64>() < p.blur_prob;
        let sigma = sample_range(rng, p.blur_sigma);
        PhotometricDraw {
            flip,
            brightness,
            contrast,
            blur_sigma: (blur && sigma > 0.0).then_some(sigma),
        }
    }

    /// Applies flip, blur, contrast then brightness to a `[C, T, H, W]` clip.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        let [c, t, h, w] = clip_dims(v, "photometric_augment")?;
        let mut d = v.to_vec();
        if self.flip {
            for row in d.chunks_mut(w) {
                row.reverse();
            }
        }
        if let Some(sigma) = self.blur_sigma {
            for frame in d.chunks_mut(h * w) {
                gaussian_blur(frame, h, w, sigma);
            }
        }
        if self.contrast != 1.0 {
            let frames = c * t;
            let mean = d.iter().sum::<f64>() / (frames * h * w) as f64;
            for x in &mut d {
                *x = (*x - mean) * self.contrast + mean;
            }
        }
        if self.brightness != 0.0 {
            for x in &mut d {
                *x += self.brightness;
            }
        }
        Tensor::from_vec(d, v.shape())
    }
}

fn gaussian_blur(frame: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * frame[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            frame[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
}

/// Draws and applies one clip-consistent photometric jitter.
pub fn photometric_augment<R: Rng>(v: &Tensor, params: &PhotometricParams, rng: &mut R) -> Result<Tensor> {
    PhotometricDraw::sample(params, rng).apply(v)
}

/// Global volume jitter for a spectrogram.
pub fn audio_gain_jitter<R: Rng>(a: &Tensor, params: &PhotometricParams, rng: &mut R) -> Tensor {
    let g = 1.0 + sample_range(rng, (-params.audio_gain, params.audio_gain));
    if g == 1.0 {
        a.clone()
    } else {
        a.scale(g)
    }
}

/// Slices a feature tube from `[D, T, H, W]` or, applying the same tube to
/// every instance, from `[N, D, T, H, W]`. Pure slicing: no resize.
pub fn feature_crop(feat: &Tensor, tube: &CropTube) -> Result<Tensor> {
    let s = feat.shape();
    if s.len() < 4 {
        return Err(TensorError::ShapeMismatch {
            op: "feature_crop",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let k = s.len();
    tube.check([s[k - 3], s[k - 2], s[k - 1]])?;
    let mut ranges: Vec<_> = s[..k - 3].iter().map(|&e| 0..e).collect();
    ranges.extend(tube.ranges());
    feat.slice(&ranges)
}

/// Crops instance `i` of `[N, D, T, H, W]` at `tubes[i]`. All tubes must
/// share extents.
pub fn feature_crop_batch(feat: &Tensor, tubes: &[CropTube]) -> Result<Tensor> {
    let s = feat.shape();
    if s.len() != 5 || s[0] != tubes.len() || tubes.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "feature_crop_batch",
            lhs: s.to_vec(),
            rhs: vec![tubes.len()],
        });
    }
    if tubes.iter().any(|t| t.extents() != tubes[0].extents()) {
        return Err(TensorError::Invalid("feature_crop_batch: tubes differ in size".into()));
    }
    let parts = tubes
        .iter()
        .enumerate()
        .map(|(i, tube)| {
            tube.check([s[2], s[3], s[4]])?;
            let mut r = vec![i..i + 1, 0..s[1]];
            r.extend(tube.ranges());
            feat.slice(&r)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    Tensor::concat(&parts, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Large,
    Medium,
    Small,
}

/// How many medium and small feature crops to take from each large crop,
/// and their sizes on the `[T1, H1, W1]` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropPlan {
    pub m: usize,
    pub n: usize,
    pub medium: usize,
    pub small: usize,
    /// `(count, length)` groups assigned to views in order, mediums first;
    /// views beyond the listed counts span all of `T1`.
    pub time: Vec<(usize, usize)>,
    pub grid: [usize; 3],
}

impl CropPlan {
    /// One medium 6×6 and two small 4×4 crops, times `1×3 + 1×2`.
    pub fn desk() -> Self {
        CropPlan {
            m: 1,
            n: 2,
            medium: 6,
            small: 4,
            time: vec![(1, 3), (1, 2)],
            grid: [4, 7, 7],
        }
    }

    /// Two medium 6×6 and four small 4×4 crops, times `2×3 + 1×2`.
    pub fn paper() -> Self {
        CropPlan {
            m: 2,
            n: 4,
            medium: 6,
            small: 4,
            time: vec![(2, 3), (1, 2)],
            grid: [4, 7, 7],
        }
    }

    pub fn none(grid: [usize; 3]) -> Self {
        CropPlan {
            m: 0,
            n: 0,
            medium: grid[1].min(grid[2]),
            small: grid[1].min(grid[2]),
            time: Vec::new(),
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.grid;
        let side = h.min(w);
        for (what, size) in [("medium", self.medium), ("small", self.small)] {
            if size == 0 || size > side {
                return Err(TensorError::Invalid(format!(
                    "{what} crop size {size} does not fit the {h}x{w} feature grid"
                )));
            }
        }
        let listed: usize = self.time.iter().map(|g| g.0).sum();
        if listed > self.m + self.n {
            return Err(TensorError::Invalid(format!(
                "time spec lists {listed} crops but the plan has {}",
                self.m + self.n
            )));
        }
        if let Some(&(_, len)) = self.time.iter().find(|g| g.1 == 0 || g.1 > t) {
            return Err(TensorError::Invalid(format!(
                "temporal crop length {len} not in 1..={t}"
            )));
        }
        Ok(())
    }

    /// Temporal length of each of the `m + n` cropped views, mediums first.
    pub fn temporal_lengths(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .time
            .iter()
            .flat_map(|&(count, len)| std::iter::repeat_n(len, count))
            .collect();
        out.resize(self.m + self.n, self.grid[0]);
        out.truncate(self.m + self.n);
        out
    }

    /// `(class, [T', side, side])` of each cropped view in order.
    pub fn view_shapes(&self) -> Vec<(SizeClass, [usize; 3])> {
        self.temporal_lengths()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if i < self.m {
                    (SizeClass::Medium, [t, self.medium, self.medium])
                } else {
                    (SizeClass::Small, [t, self.small, self.small])
                }
            })
            .collect()
    }
}

/// Parses `"2x3 + 1x2"` (also `×`) into `(count, length)` groups; empty
/// text gives no groups.
pub fn parse_time_spec(text: &str) -> Result<Vec<(usize, usize)>> {
    let bad = || TensorError::Invalid(format!("bad temporal crop spec {text:?}; expected e.g. 2x3+1x2"));
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split('+')
        .map(|part| {
            let part = part.trim().replace('×', "x");
            let (c, l) = part.split_once('x').ok_or_else(bad)?;
            let c = c.trim().parse().map_err(|_| bad())?;
            let l = l.trim().parse().map_err(|_| bad())?;
            Ok((c, l))
        })
        .collect()
}

pub fn format_time_spec(groups: &[(usize, usize)]) -> String {
    groups
        .iter()
        .map(|(c, l)| format!("{c}x{l}"))
        .collect::<Vec<_>>()
        .join("+")
}

/// Embeddings derived from one large crop, each `[N, d]`.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub source: u8,
    pub views: Vec<(SizeClass, Tensor)>,
}

impl ViewSet {
    pub fn large(&self) -> &Tensor {
        &self
            .views
            .iter()
            .find(|v| v.0 == SizeClass::Large)
            .expect("one large view")
            .1
    }

    /// Medium then small embeddings, in plan order.
    pub fn crops(&self) -> impl Iterator<Item = &(SizeClass, Tensor)> {
        self.views.iter().filter(|v| v.0 != SizeClass::Large)
    }

    pub fn count(&self, class: SizeClass) -> usize {
        self.views.iter().filter(|v| v.0 == class).count()
    }
}

/// Draws one tube per instance for every cropped view of `plan`.
pub fn sample_feature_tubes<R: Rng>(
    plan: &CropPlan,
    instances: usize,
    rng: &mut R,
) -> Result<Vec<(SizeClass, Vec<CropTube>)>> {
    plan.validate()?;
    let [t, h, w] = plan.grid;
    plan.view_shapes()
        .into_iter()
        .map(|(class, [tl, side, _])| {
            let tubes = (0..instances)
                .map(|_| {
                    let t0 = rng.random_range(0..=t - tl);
                    let y0 = rng.random_range(0..=h - side);
                    let x0 = rng.random_range(0..=w - side);
                    CropTube::new(
                        (t0, t0 + tl),
                        (y0, y0 + side),
                        (x0, x0 + side),
                        plan.grid,
                        Domain::Feature,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((class, tubes))
        })
        .collect()
}

/// Builds both view sets from the `[N, D, T1, H1, W1]` maps of the two
/// large crops. `embed(crop, offsets)` pools and projects a (cropped) map
/// whose instance `i` starts at absolute time `offsets[i]`.
pub fn sample_view_sets<R, F>(
    feat1: &Tensor,
    feat2: &Tensor,
    plan: &CropPlan,
    embed: F,
    rng: &mut R,
) -> Result<(ViewSet, ViewSet)>
where
    R: Rng,
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    let mut sets = Vec::with_capacity(2);
    for (source, feat) in [(1u8, feat1), (2u8, feat2)] {
        let s = feat.shape();
        if s.len() != 5 || s[2..] != plan.grid {
            return Err(TensorError::ShapeMismatch {
                op: "sample_view_sets",
                lhs: s.to_vec(),
                rhs: plan.grid.to_vec(),
            });
        }
        let n = s[0];
        let mut views = vec![(SizeClass::Large, embed(feat, &vec![0; n])?)];
        for (class, tubes) in sample_feature_tubes(plan, n, rng)? {
            let crop = feature_crop_batch(feat, &tubes)?;
            let offsets: Vec<usize> = tubes.iter().map(|t| t.t_min).collect();
            views.push((class, embed(&crop, &offsets)?));
        }
        sets.push(ViewSet { source, views });
    }
    let second = sets.pop().expect("two sets");
    let first = sets.pop().expect("two sets");
    Ok((first, second))
}
