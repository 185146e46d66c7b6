//! Category-aware patch templates and the quad-directional mixing cascade.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FusionParams;
use crate::math;
use crate::tensor::{FlowField, FrameStack, LabelMap, Tensor, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "S")]
    Source,
    #[serde(rename = "T")]
    Target,
}

/// Where a bundle's content came from, in mixing notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    S,
    T,
    /// S→S
    SourceIntra,
    /// T→T
    TargetIntra,
    /// T→(S→S)
    TargetIntoSourceIntra,
    /// S→(T→T)
    SourceIntoTargetIntra,
    /// S→T (one-way, ablations only)
    SourceIntoTarget,
    /// T→S (one-way, ablations only)
    TargetIntoSource,
}

impl Tag {
    pub fn notation(self) -> &'static str {
        match self {
            Tag::S => "S",
            Tag::T => "T",
            Tag::SourceIntra => "S→S",
            Tag::TargetIntra => "T→T",
            Tag::TargetIntoSourceIntra => "T→(S→S)",
            Tag::SourceIntoTargetIntra => "S→(T→T)",
            Tag::SourceIntoTarget => "S→T",
            Tag::TargetIntoSource => "T→S",
        }
    }

    fn after_paste(self, template: Domain) -> Result<Tag> {
        use Domain::*;
        Ok(match (self, template) {
            (Tag::S, Source) => Tag::SourceIntra,
            (Tag::T, Target) => Tag::TargetIntra,
            (Tag::SourceIntra, Target) => Tag::TargetIntoSourceIntra,
            (Tag::TargetIntra, Source) => Tag::SourceIntoTargetIntra,
            (Tag::T, Source) => Tag::SourceIntoTarget,
            (Tag::S, Target) => Tag::TargetIntoSource,
            (base, _) => {
                return Err(Error::Policy(format!(
                    "cannot paste a {} template onto a {} bundle",
                    if template == Source { "source" } else { "target" },
                    base
                )))
            }
        })
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.notation())
    }
}

/// Builds a U8 T×H×W tensor.
fn mask_tensor(t: usize, h: usize, w: usize, data: Vec<u8>) -> Tensor {
    Tensor::from_u8(vec![t, h, w], data).expect("mask shape")
}

/// Category-restricted cut-out of one sample: frames, label, flow and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTemplate {
    frames: FrameStack,
    label: LabelMap,
    flow: Option<FlowField>,
    mask_stack: Tensor,
    categories: Vec<u16>,
    source_domain: Domain,
}

impl PatchTemplate {
    /// A template that selects nothing; mixing it is the identity.
    pub fn empty(
        frames: usize,
        channels: usize,
        h: usize,
        w: usize,
        num_categories: usize,
        video: bool,
        domain: Domain,
    ) -> Result<Self> {
        Ok(Self {
            frames: FrameStack::from_vec(frames, channels, h, w, vec![0.0; frames * channels * h * w])?,
            label: LabelMap::filled(h, w, IGNORE, num_categories)?,
            flow: video.then(|| FlowField::zeros(h, w)),
            mask_stack: mask_tensor(frames, h, w, vec![0; frames * h * w]),
            categories: Vec::new(),
            source_domain: domain,
        })
    }

    pub fn frames(&self) -> &FrameStack {
        &self.frames
    }

    pub fn label(&self) -> &LabelMap {
        &self.label
    }

    pub fn flow(&self) -> Option<&FlowField> {
        self.flow.as_ref()
    }

    /// T×H×W binary masks; the last slice is the mask at `t`.
    pub fn mask_stack(&self) -> &Tensor {
        &self.mask_stack
    }

    pub fn categories(&self) -> &[u16] {
        &self.categories
    }

    pub fn source_domain(&self) -> Domain {
        self.source_domain
    }

    pub fn is_empty(&self) -> bool {
        self.mask_stack.as_u8().unwrap().iter().all(|&m| m == 0)
    }

    fn mask(&self, i: usize) -> &[u8] {
        let n = self.label.height() * self.label.width();
        &self.mask_stack.as_u8().unwrap()[i * n..(i + 1) * n]
    }
}

/// Cuts the pixels whose (filtered) label lies in `categories` out of a sample.
///
/// Video mode takes a two-frame stack plus `flow` and `label_prev`; image mode
/// takes a single frame and neither.
pub fn extract_template(
    frames: &FrameStack,
    label: &LabelMap,
    flow: Option<&FlowField>,
    label_prev: Option<&LabelMap>,
    categories: &[u16],
    domain: Domain,
) -> Result<PatchTemplate> {
    let (t, c, h, w) = (frames.len(), frames.channels(), frames.height(), frames.width());
    let k = label.num_categories();
    if categories.is_empty() {
        return Err(Error::Category("template needs at least one category".into()));
    }
    if let Some(bad) = categories.iter().find(|&&id| id as usize >= k) {
        return Err(Error::Category(format!(
            "category {bad} outside label space of {k}"
        )));
    }
    if label.height() != h || label.width() != w {
        return Err(Error::shape("label and frames differ in size"));
    }
    let video = t == 2;
    let (want, have_flow, have_prev) = (video, flow.is_some(), label_prev.is_some());
    if have_flow != want || have_prev != want {
        return Err(Error::shape(
            "video templates need flow and the previous label; image templates take neither",
        ));
    }
    if let Some(f) = flow {
        if f.height() != h || f.width() != w {
            return Err(Error::shape("flow and frames differ in size"));
        }
    }
    if let Some(lp) = label_prev {
        if lp.height() != h || lp.width() != w || lp.num_categories() != k {
            return Err(Error::shape("previous label does not match current label"));
        }
    }

    let n = h * w;
    let select = |l: &LabelMap| -> Vec<u8> {
        l.values()
            .iter()
            .map(|&v| u8::from(v != IGNORE && categories.contains(&v)))
            .collect()
    };
    let m_t = select(label);
    let mut masks = match label_prev {
        Some(lp) => select(lp),
        None => Vec::new(),
    };
    masks.extend_from_slice(&m_t);

    let mut data = frames.data().to_vec();
    for (fi, frame) in data.chunks_exact_mut(c * n).enumerate() {
        let m = &masks[fi * n..(fi + 1) * n];
        for plane in frame.chunks_exact_mut(n) {
            for (v, &keep) in plane.iter_mut().zip(m) {
                if keep == 0 {
                    *v = 0.0;
                }
            }
        }
    }
    let label_vals = label
        .values()
        .iter()
        .zip(&m_t)
        .map(|(&v, &keep)| if keep == 1 { v } else { IGNORE })
        .collect();
    let flow = match flow {
        Some(f) => {
            let m_prev = &masks[..n];
            let vals = f
                .values()
                .chunks_exact(2)
                .zip(m_prev)
                .flat_map(|(uv, &keep)| if keep == 1 { [uv[0], uv[1]] } else { [0.0, 0.0] })
                .collect();
            Some(FlowField::from_vec(h, w, vals)?)
        }
        None => None,
    };
    let mut cats = categories.to_vec();
    cats.sort_unstable();
    cats.dedup();
    Ok(PatchTemplate {
        frames: FrameStack::from_vec(t, c, h, w, data)?,
        label: LabelMap::from_vec(h, w, label_vals, k)?,
        flow,
        mask_stack: mask_tensor(t, h, w, masks),
        categories: cats,
        source_domain: domain,
    })
}

/// A (possibly mixed) training sample with per-pixel provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixBundle {
    frames: FrameStack,
    label: LabelMap,
    flow: Option<FlowField>,
    provenance: Tensor,
    tag: Tag,
}

impl MixBundle {
    /// An unmixed sample of `domain`.
    pub fn raw(
        frames: FrameStack,
        label: LabelMap,
        flow: Option<FlowField>,
        domain: Domain,
    ) -> Result<Self> {
        let (t, h, w) = (frames.len(), frames.height(), frames.width());
        if label.height() != h || label.width() != w {
            return Err(Error::shape("label and frames differ in size"));
        }
        match (&flow, t) {
            (Some(f), 2) if f.height() == h && f.width() == w => {}
            (None, 1) => {}
            _ => {
                return Err(Error::shape(
                    "video bundles need two frames and a matching flow; image bundles one frame and no flow",
                ))
            }
        }
        Ok(Self {
            frames,
            label,
            flow,
            provenance: mask_tensor(t, h, w, vec![0; t * h * w]),
            tag: match domain {
                Domain::Source => Tag::S,
                Domain::Target => Tag::T,
            },
        })
    }

    pub fn frames(&self) -> &FrameStack {
        &self.frames
    }

    pub fn label(&self) -> &LabelMap {
        &self.label
    }

    pub fn flow(&self) -> Option<&FlowField> {
        self.flow.as_ref()
    }

    /// T×H×W codes: 0 where the base sample shows through, 1 where any pasted
    /// template does.
    pub fn provenance(&self) -> &Tensor {
        &self.provenance
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    /// Same bundle with the frames replaced (shape must match).
    pub fn with_frames(&self, frames: FrameStack) -> Result<Self> {
        if frames.tensor().shape() != self.frames.tensor().shape() {
            return Err(Error::shape("replacement frames differ in shape"));
        }
        Ok(Self {
            frames,
            ..self.clone()
        })
    }
}

/// Pastes `template` over `base`: template content wins inside its masks.
pub fn mix(base: &MixBundle, template: &PatchTemplate) -> Result<MixBundle> {
    if base.label.num_categories() != template.label.num_categories() {
        return Err(Error::Category(format!(
            "label spaces differ: {} vs {} categories",
            base.label.num_categories(),
            template.label.num_categories()
        )));
    }
    if base.frames.tensor().shape() != template.frames.tensor().shape() {
        return Err(Error::shape(format!(
            "frames differ: {:?} vs {:?}",
            base.frames.tensor().shape(),
            template.frames.tensor().shape()
        )));
    }
    if base.flow.is_some() != template.flow.is_some() {
        return Err(Error::shape("video and image operands cannot be mixed"));
    }
    let tag = base.tag.after_paste(template.source_domain)?;
    let (t, c, h, w) = (
        base.frames.len(),
        base.frames.channels(),
        base.frames.height(),
        base.frames.width(),
    );
    let n = h * w;

    let mut frames = base.frames.data().to_vec();
    let tf = template.frames.data();
    for fi in 0..t {
        let m = template.mask(fi);
        for ch in 0..c {
            let off = (fi * c + ch) * n;
            for i in 0..n {
                if m[i] == 1 {
                    frames[off + i] = tf[off + i];
                }
            }
        }
    }

    let m_t = template.mask(t - 1);
    let label = base
        .label
        .values()
        .iter()
        .zip(template.label.values())
        .zip(m_t)
        .map(|((&b, &p), &m)| if m == 1 { p } else { b })
        .collect();

    let flow = match (&base.flow, &template.flow) {
        (Some(bf), Some(tf)) => {
            let m_prev = template.mask(0);
            let mut vals = bf.values().to_vec();
            for i in 0..n {
                if m_prev[i] == 1 {
                    vals[2 * i] = tf.values()[2 * i];
                    vals[2 * i + 1] = tf.values()[2 * i + 1];
                }
            }
            Some(FlowField::from_vec(h, w, vals)?)
        }
        _ => None,
    };

    let provenance = base
        .provenance
        .as_u8()?
        .iter()
        .zip(template.mask_stack.as_u8()?)
        .map(|(&p, &m)| p | m)
        .collect();

    Ok(MixBundle {
        frames: FrameStack::from_vec(t, c, h, w, frames)?,
        label: LabelMap::from_vec(h, w, label, base.label.num_categories())?,
        flow,
        provenance: mask_tensor(t, h, w, provenance),
        tag,
    })
}

/// Elementwise OR of the source and target template masks.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionMask {
    values: Tensor,
}

impl UnionMask {
    pub fn new(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.shape() != b.shape() || a.rank() != 3 {
            return Err(Error::shape(format!(
                "masks must share a T×H×W shape, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let v = a.as_u8()?.iter().zip(b.as_u8()?).map(|(x, y)| x | y).collect();
        Ok(Self {
            values: Tensor::from_u8(a.shape().to_vec(), v)?,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Mask slice `i` as 0/1 floats.
    pub(crate) fn plane_f64(&self, i: usize) -> Vec<f64> {
        let n = self.height() * self.width();
        self.values.as_u8().unwrap()[i * n..(i + 1) * n]
            .iter()
            .map(|&m| m as f64)
            .collect()
    }
}

/// Output of one quad-directional step.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadMixed {
    /// T→(S→S)
    pub source: MixBundle,
    /// S→(T→T)
    pub target: MixBundle,
    pub union: UnionMask,
}

/// Intra-domain pastes followed by cross-domain pastes; only the two
/// inter-mixed bundles are returned.
pub fn quadmix_step(
    src: &MixBundle,
    tgt: &MixBundle,
    src_tmpl: &PatchTemplate,
    tgt_tmpl: &PatchTemplate,
) -> Result<QuadMixed> {
    if let Some(k) = src_tmpl
        .categories
        .iter()
        .find(|k| tgt_tmpl.categories.contains(k))
    {
        return Err(Error::Policy(format!(
            "category {k} appears in both source and target templates"
        )));
    }
    if src_tmpl.source_domain != Domain::Source || tgt_tmpl.source_domain != Domain::Target {
        return Err(Error::Policy("templates passed in the wrong domain slots".into()));
    }
    let s_intra = mix(src, src_tmpl)?;
    let t_intra = mix(tgt, tgt_tmpl)?;
    Ok(QuadMixed {
        source: mix(&s_intra, tgt_tmpl)?,
        target: mix(&t_intra, src_tmpl)?,
        union: UnionMask::new(&src_tmpl.mask_stack, &tgt_tmpl.mask_stack)?,
    })
}

/// Bilinear resize of an H×W plane to h×w with half-pixel centres.
/// Same-size resizing is the identity.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let t = math::bilinear_taps(fx, fy, h, w);
            out.push((0..t.len).map(|k| src[t.idx[k]] * t.wt[k]).sum());
        }
    }
    out
}

/// One frame of feature-level mixing on planar C×N data.
pub(crate) fn feature_mix_kernel(
    src: &[f64],
    tgt: &[f64],
    mask: &[f64],
    channels: usize,
    psi_w: &[f64],
    psi_b: &[f64],
) -> Vec<f64> {
    let n = mask.len();
    let mut ms = src.to_vec();
    let mut mt = tgt.to_vec();
    for ch in 0..channels {
        for i in 0..n {
            ms[ch * n + i] *= mask[i];
            mt[ch * n + i] *= mask[i];
        }
    }
    let mut out = math::affine_pixels(psi_w, psi_b, &[&ms, &mt], &[channels, channels], n);
    for ch in 0..channels {
        for i in 0..n {
            out[ch * n + i] += tgt[ch * n + i] * (1.0 - mask[i]);
        }
    }
    out
}

/// Blends inter-mixed source features into inter-mixed target features under
/// the softly downsampled union mask.
pub fn feature_mix(
    f_src: &Tensor,
    f_tgt: &Tensor,
    union: &UnionMask,
    psi: &FusionParams,
) -> Result<Tensor> {
    let (t, c, h, w) = match *f_src.shape() {
        [t, c, h, w] => (t, c, h, w),
        ref s => return Err(Error::shape(format!("features must be T×C×h×w, got {s:?}"))),
    };
    if f_tgt.shape() != f_src.shape() {
        return Err(Error::shape(format!(
            "feature shapes differ: {:?} vs {:?}",
            f_src.shape(),
            f_tgt.shape()
        )));
    }
    if union.frames() != t || h > union.height() || w > union.width() {
        return Err(Error::shape(format!(
            "union mask {:?} cannot cover features {:?}",
            union.values().shape(),
            f_src.shape()
        )));
    }
    if psi.channels() != c {
        return Err(Error::shape(format!(
            "psi maps {} channels, features have {c}",
            psi.channels()
        )));
    }
    let (pw, pb) = (psi.weights_f64(), psi.bias_f64());
    let n = h * w;
    let (sv, tv) = (f_src.as_f32()?, f_tgt.as_f32()?);
    let mut out = Vec::with_capacity(t * c * n);
    for fi in 0..t {
        let mask = resize_bilinear(&union.plane_f64(fi), union.height(), union.width(), h, w);
        let slice = |v: &[f32]| -> Vec<f64> {
            v[fi * c * n..(fi + 1) * c * n].iter().map(|&x| x as f64).collect()
        };
        let o = feature_mix_kernel(&slice(sv), &slice(tv), &mask, c, &pw, &pb);
        out.extend(o.into_iter().map(|x| x as f32));
    }
    Tensor::from_f32(vec![t, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_bundle(rng: &mut Rng, t: usize, h: usize, w: usize, k: usize, d: Domain) -> MixBundle {
        let frames = FrameStack::from_vec(
            t,
            3,
            h,
            w,
            (0..t * 3 * h * w).map(|_| rng.next_f64() as f32).collect(),
        )
        .unwrap();
        let label = LabelMap::from_vec(
            h,
            w,
            (0..h * w).map(|_| rng.below(k as u64) as u16).collect(),
            k,
        )
        .unwrap();
        let flow = (t == 2).then(|| {
            FlowField::from_vec(h, w, (0..h * w * 2).map(|_| rng.uniform(-2.0, 2.0) as f32).collect())
                .unwrap()
        });
        MixBundle::raw(frames, label, flow, d).unwrap()
    }

    fn random_labels(rng: &mut Rng, h: usize, w: usize, k: usize) -> LabelMap {
        LabelMap::from_vec(
            h,
            w,
            (0..h * w)
                .map(|_| if rng.bernoulli(0.1) { IGNORE } else { rng.below(k as u64) as u16 })
                .collect(),
            k,
        )
        .unwrap()
    }

    #[test]
    fn all_ignore_gives_empty_template() {
        let mut rng = Rng::new(1);
        let b = random_bundle(&mut rng, 2, 4, 4, 3, Domain::Source);
        let ign = LabelMap::filled(4, 4, IGNORE, 3).unwrap();
        let tpl = extract_template(b.frames(), &ign, b.flow(), Some(&ign), &[1], Domain::Source)
            .unwrap();
        assert!(tpl.is_empty());
        assert!(tpl.frames().data().iter().all(|&v| v == 0.0));
        assert!(tpl.flow().unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_label_gives_full_template() {
        let mut rng = Rng::new(2);
        let b = random_bundle(&mut rng, 2, 4, 4, 3, Domain::Source);
        let all = LabelMap::filled(4, 4, 2, 3).unwrap();
        let tpl = extract_template(b.frames(), &all, b.flow(), Some(&all), &[2], Domain::Source)
            .unwrap();
        assert_eq!(tpl.frames(), b.frames());
        assert_eq!(tpl.label(), &all);
        assert_eq!(tpl.flow(), b.flow());
        assert!(tpl.mask_stack().as_u8().unwrap().iter().all(|&m| m == 1));
    }

    #[test]
    fn checkerboard_masks() {
        let mut rng = Rng::new(3);
        let b = random_bundle(&mut rng, 1, 4, 4, 4, Domain::Target);
        let vals: Vec<u16> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 3 } else { 1 }).collect();
        let l = LabelMap::from_vec(4, 4, vals.clone(), 4).unwrap();
        let tpl = extract_template(b.frames(), &l, None, None, &[3], Domain::Target).unwrap();
        let m = tpl.mask_stack().as_u8().unwrap();
        for i in 0..16 {
            assert_eq!(m[i], u8::from(vals[i] == 3));
            assert_eq!(tpl.label().values()[i], if vals[i] == 3 { 3 } else { IGNORE });
        }
    }

    #[test]
    fn extract_errors() {
        let mut rng = Rng::new(4);
        let b = random_bundle(&mut rng, 1, 3, 3, 3, Domain::Source);
        assert!(matches!(
            extract_template(b.frames(), b.label(), None, None, &[3], Domain::Source),
            Err(Error::Category(_))
        ));
        assert!(matches!(
            extract_template(b.frames(), b.label(), Some(&FlowField::zeros(3, 3)), None, &[1], Domain::Source),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn empty_template_is_identity() {
        let mut rng = Rng::new(5);
        let b = random_bundle(&mut rng, 2, 6, 5, 4, Domain::Target);
        let e = PatchTemplate::empty(2, 3, 6, 5, 4, true, Domain::Target).unwrap();
        let m = mix(&b, &e).unwrap();
        assert_eq!(m.frames(), b.frames());
        assert_eq!(m.label(), b.label());
        assert_eq!(m.flow(), b.flow());
        assert_eq!(m.provenance(), b.provenance());
        assert_eq!(m.tag(), Tag::TargetIntra);
    }

    #[test]
    fn full_template_overwrites_everything() {
        let mut rng = Rng::new(6);
        let base = random_bundle(&mut rng, 2, 4, 4, 3, Domain::Source);
        let donor = random_bundle(&mut rng, 2, 4, 4, 3, Domain::Source);
        let all = LabelMap::filled(4, 4, 1, 3).unwrap();
        let tpl = extract_template(donor.frames(), &all, donor.flow(), Some(&all), &[1], Domain::Source)
            .unwrap();
        let m = mix(&base, &tpl).unwrap();
        assert_eq!(m.frames(), donor.frames());
        assert_eq!(m.label(), &all);
        assert_eq!(m.flow(), donor.flow());
    }

    /// Brute-force per-pixel select, written independently of `mix`.
    fn select_oracle(base: &MixBundle, donor: &MixBundle, lt: &LabelMap, lp: &LabelMap, cats: &[u16]) -> (Vec<f32>, Vec<u16>, Vec<f32>) {
        let (h, w) = (lt.height(), lt.width());
        let n = h * w;
        let inside = |l: &LabelMap, i: usize| {
            let v = l.values()[i];
            v != IGNORE && cats.contains(&v)
        };
        let mut frames = Vec::new();
        for f in 0..2 {
            let lab = if f == 0 { lp } else { lt };
            for c in 0..3 {
                for i in 0..n {
                    let idx = (f * 3 + c) * n + i;
                    frames.push(if inside(lab, i) { donor.frames().data()[idx] } else { base.frames().data()[idx] });
                }
            }
        }
        let labels = (0..n)
            .map(|i| if inside(lt, i) { lt.values()[i] } else { base.label().values()[i] })
            .collect();
        let mut flow = Vec::new();
        for i in 0..n {
            let from = if inside(lp, i) { donor.flow().unwrap() } else { base.flow().unwrap() };
            flow.push(from.values()[2 * i]);
            flow.push(from.values()[2 * i + 1]);
        }
        (frames, labels, flow)
    }

    #[test]
    fn mix_matches_select_oracle() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let base = random_bundle(&mut rng, 2, 4, 4, 5, Domain::Target);
            let donor = random_bundle(&mut rng, 2, 4, 4, 5, Domain::Target);
            let lt = random_labels(&mut rng, 4, 4, 5);
            let lp = random_labels(&mut rng, 4, 4, 5);
            let cats = [1u16, 3];
            let tpl = extract_template(donor.frames(), &lt, donor.flow(), Some(&lp), &cats, Domain::Target)
                .unwrap();
            let m = mix(&base, &tpl).unwrap();
            let (f, l, o) = select_oracle(&base, &donor, &lt, &lp, &cats);
            assert_eq!(m.frames().data(), &f[..]);
            assert_eq!(m.label().values(), &l[..]);
            assert_eq!(m.flow().unwrap().values(), &o[..]);
        }
    }

    #[test]
    fn tag_rules() {
        let mut rng = Rng::new(8);
        let s = random_bundle(&mut rng, 1, 3, 3, 3, Domain::Source);
        let t = random_bundle(&mut rng, 1, 3, 3, 3, Domain::Target);
        let es = PatchTemplate::empty(1, 3, 3, 3, 3, false, Domain::Source).unwrap();
        let et = PatchTemplate::empty(1, 3, 3, 3, 3, false, Domain::Target).unwrap();
        assert_eq!(mix(&t, &es).unwrap().tag(), Tag::SourceIntoTarget);
        assert_eq!(mix(&s, &et).unwrap().tag(), Tag::TargetIntoSource);
        let ss = mix(&s, &es).unwrap();
        assert!(matches!(mix(&ss, &es), Err(Error::Policy(_))));
        let tss = mix(&ss, &et).unwrap();
        assert_eq!(tss.tag().to_string(), "T→(S→S)");
        assert!(matches!(mix(&tss, &es), Err(Error::Policy(_))));
    }

    #[test]
    fn label_space_mismatch() {
        let mut rng = Rng::new(9);
        let s = random_bundle(&mut rng, 1, 3, 3, 3, Domain::Source);
        let e = PatchTemplate::empty(1, 3, 3, 3, 4, false, Domain::Source).unwrap();
        assert!(matches!(mix(&s, &e), Err(Error::Category(_))));
    }

    #[test]
    fn quadmix_with_empty_templates_is_identity() {
        let mut rng = Rng::new(10);
        let s = random_bundle(&mut rng, 2, 5, 5, 4, Domain::Source);
        let t = random_bundle(&mut rng, 2, 5, 5, 4, Domain::Target);
        let es = PatchTemplate::empty(2, 3, 5, 5, 4, true, Domain::Source).unwrap();
        let et = PatchTemplate::empty(2, 3, 5, 5, 4, true, Domain::Target).unwrap();
        let q = quadmix_step(&s, &t, &es, &et).unwrap();
        assert_eq!(q.source.frames(), s.frames());
        assert_eq!(q.target.label(), t.label());
        assert_eq!(q.source.tag(), Tag::TargetIntoSourceIntra);
        assert_eq!(q.target.tag(), Tag::SourceIntoTargetIntra);
        assert!(q.union.values().as_u8().unwrap().iter().all(|&m| m == 0));
    }

    #[test]
    fn quadmix_rejects_shared_categories() {
        let mut rng = Rng::new(11);
        let s = random_bundle(&mut rng, 1, 4, 4, 4, Domain::Source);
        let t = random_bundle(&mut rng, 1, 4, 4, 4, Domain::Target);
        let ts = extract_template(s.frames(), s.label(), None, None, &[1, 2], Domain::Source).unwrap();
        let tt = extract_template(t.frames(), t.label(), None, None, &[2], Domain::Target).unwrap();
        assert!(matches!(quadmix_step(&s, &t, &ts, &tt), Err(Error::Policy(_))));
    }

    #[test]
    fn quadmix_provenance_is_mask_union() {
        let mut rng = Rng::new(12);
        let s = random_bundle(&mut rng, 2, 8, 8, 4, Domain::Source);
        let t = random_bundle(&mut rng, 2, 8, 8, 4, Domain::Target);
        let lp = random_labels(&mut rng, 8, 8, 4);
        let ts = extract_template(s.frames(), s.label(), s.flow(), Some(&lp), &[1], Domain::Source).unwrap();
        let tt = extract_template(t.frames(), t.label(), t.flow(), Some(&lp), &[2], Domain::Target).unwrap();
        let q = quadmix_step(&s, &t, &ts, &tt).unwrap();
        let ms = ts.mask_stack().as_u8().unwrap();
        let mt = tt.mask_stack().as_u8().unwrap();
        let expect: Vec<u8> = ms.iter().zip(mt).map(|(a, b)| u8::from(*a == 1 || *b == 1)).collect();
        assert_eq!(q.source.provenance().as_u8().unwrap(), &expect[..]);
        assert_eq!(q.target.provenance().as_u8().unwrap(), &expect[..]);
        assert_eq!(q.union.values().as_u8().unwrap(), &expect[..]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
        let ones = vec![1.0; 64];
        assert!(resize_bilinear(&ones, 8, 8, 3, 5).iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // Exact halving with half-pixel centres is 2×2 average pooling.
        let grid: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64).collect();
        let pooled: Vec<f64> = (0..4)
            .map(|o| {
                let (y, x) = (2 * (o / 2), 2 * (o % 2));
                (grid[y * 4 + x] + grid[y * 4 + x + 1] + grid[(y + 1) * 4 + x] + grid[(y + 1) * 4 + x + 1]) / 4.0
            })
            .collect();
        assert_eq!(resize_bilinear(&grid, 4, 4, 2, 2), pooled);
    }

    fn feats(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_f32(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn feature_mix_extremes() {
        let mut rng = Rng::new(13);
        let a = feats(&mut rng, vec![2, 3, 4, 4]);
        let b = feats(&mut rng, vec![2, 3, 4, 4]);
        let zeros = Tensor::from_u8(vec![2, 4, 4], vec![0; 32]).unwrap();
        let ones = Tensor::from_u8(vec![2, 4, 4], vec![1; 32]).unwrap();
        let psi = FusionParams::averaging(3);
        let none = feature_mix(&a, &b, &UnionMask::new(&zeros, &zeros).unwrap(), &psi).unwrap();
        assert_eq!(none, b);
        let all = feature_mix(&a, &b, &UnionMask::new(&ones, &zeros).unwrap(), &psi).unwrap();
        for ((o, x), y) in all.as_f32().unwrap().iter().zip(a.as_f32().unwrap()).zip(b.as_f32().unwrap()) {
            assert!((o - 0.5 * (x + y)).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_mix_matches_loop_oracle() {
        let mut rng = Rng::new(14);
        let (t, c, h, w) = (2, 3, 4, 4);
        let a = feats(&mut rng, vec![t, c, h, w]);
        let b = feats(&mut rng, vec![t, c, h, w]);
        let mvals: Vec<u8> = (0..t * 8 * 8).map(|_| rng.below(2) as u8).collect();
        let m = Tensor::from_u8(vec![t, 8, 8], mvals.clone()).unwrap();
        let union = UnionMask::new(&m, &m).unwrap();
        let psi = FusionParams::new(feats(&mut rng, vec![c, 2 * c]), feats(&mut rng, vec![c])).unwrap();
        let out = feature_mix(&a, &b, &union, &psi).unwrap();
        let (av, bv, ov) = (a.as_f32().unwrap(), b.as_f32().unwrap(), out.as_f32().unwrap());
        let pw = psi.weights().as_f32().unwrap();
        let pb = psi.bias().as_f32().unwrap();
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    // Exact 2× downsampling with half-pixel centres is a 2×2 box mean.
                    let mut md = 0.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        md += mvals[f * 64 + (2 * y + dy) * 8 + 2 * x + dx] as f64 * 0.25;
                    }
                    for o in 0..c {
                        let mut acc = pb[o] as f64;
                        for j in 0..c {
                            let idx = ((f * c + j) * h + y) * w + x;
                            acc += pw[o * 2 * c + j] as f64 * av[idx] as f64 * md;
                            acc += pw[o * 2 * c + c + j] as f64 * bv[idx] as f64 * md;
                        }
                        let idx = ((f * c + o) * h + y) * w + x;
                        acc += bv[idx] as f64 * (1.0 - md);
                        assert!((ov[idx] as f64 - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn feature_mix_shape_errors() {
        let mut rng = Rng::new(15);
        let a = feats(&mut rng, vec![1, 2, 4, 4]);
        let b = feats(&mut rng, vec![1, 2, 4, 3]);
        let m = Tensor::from_u8(vec![1, 4, 4], vec![0; 16]).unwrap();
        let u = UnionMask::new(&m, &m).unwrap();
        assert!(matches!(
            feature_mix(&a, &b, &u, &FusionParams::averaging(2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            feature_mix(&a, &a, &u, &FusionParams::averaging(3)),
            Err(Error::Shape(_))
        ));
    }
}
