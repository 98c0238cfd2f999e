use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::anatomy::SubjectGeometry;
use super::preprocess::{preprocess, preprocess_labels};
use super::render::{render_image, DomainStyle, StyleId};
use crate::error::{invalid, Error, Result};
use crate::tensor::io::{self, DType, Entry};
use crate::tensor::{derive_seed, rng_from_seed, Labels, Scalar, Shape, Tensor4};

/// Role of a domain in joint training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainRole {
    /// Annotated domain; masks feed the segmentation loss.
    Reference,
    /// Unannotated domain; masks exist only for evaluation.
    Target,
}

impl DomainRole {
    pub fn dir_name(self) -> &'static str {
        match self {
            DomainRole::Reference => "reference",
            DomainRole::Target => "target",
        }
    }

    fn tag(self) -> u64 {
        match self {
            DomainRole::Reference => 1,
            DomainRole::Target => 2,
        }
    }
}

/// One subject: preprocessed slices with matching label planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub style: StyleId,
    /// Millimetres per pixel after preprocessing.
    pub spacing: f64,
    pub size: usize,
    pub images: Vec<Vec<f64>>,
    pub masks: Vec<Vec<u8>>,
    /// Set for target-domain subjects: masks may be used for scoring only.
    pub evaluation_only: bool,
}

impl Subject {
    pub fn slice_count(&self) -> usize {
        self.images.len()
    }

    /// All slices as an `S x 1 x H x W` tensor.
    pub fn image_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let data = self.images.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor4::from_vec(Shape::new(self.images.len(), 1, self.size, self.size), data)
            .expect("subject slices share one size")
    }

    /// Labels for slice `i`, carrying the evaluation-only provenance flag.
    pub fn labels(&self, i: usize) -> Labels {
        Labels::new(1, self.size, self.size, self.masks[i].clone(), self.evaluation_only)
            .expect("mask matches slice")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Network input size after preprocessing.
    pub image_size: usize,
    /// Rendered size before crop and resample.
    pub source_size: usize,
    pub slices_per_subject: usize,
    /// Spacing at the rendered resolution.
    pub spacing: f64,
    pub reference_subjects: usize,
    pub target_subjects: usize,
    pub target_style: StyleId,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            source_size: 72,
            slices_per_subject: 8,
            spacing: 0.5,
            reference_subjects: 50,
            target_subjects: 50,
            target_style: StyleId::TargetA,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices_per_subject == 0 {
            return Err(invalid("subjects need at least one slice"));
        }
        if self.image_size == 0 || self.image_size > self.source_size {
            return Err(invalid(format!(
                "image size {} must be in 1..={}",
                self.image_size, self.source_size
            )));
        }
        Ok(())
    }
}

/// Renders and preprocesses one subject. Anatomy varies smoothly across
/// slices; each slice draws its own bias field and noise.
pub fn generate_subject(
    cfg: &DatasetConfig,
    role: DomainRole,
    index: usize,
    style: &DomainStyle,
    master_seed: u64,
) -> Result<Subject> {
    cfg.validate()?;
    let seed = derive_seed(master_seed, &[role.tag(), index as u64]);
    let id = format!("{}_{index:03}", role.dir_name());
    let geometry = SubjectGeometry::sample(seed, cfg.source_size)?;
    let mut images = Vec::with_capacity(cfg.slices_per_subject);
    let mut masks = Vec::with_capacity(cfg.slices_per_subject);
    let n = cfg.slices_per_subject;
    for s in 0..n {
        let t = (s as f64 + 0.5) / n as f64;
        let slice_seed = derive_seed(seed, &[s as u64]);
        let map = geometry.slice(t, cfg.spacing, slice_seed);
        let raw = render_image(&map, style, derive_seed(slice_seed, &[0]))?;
        let img = preprocess(&raw, cfg.source_size, cfg.image_size)
            .map_err(|e| invalid(format!("{id} slice {s}: {e}")))?;
        images.push(img);
        masks.push(preprocess_labels(&map.labels, cfg.source_size, cfg.image_size));
    }
    let margin = super::preprocess::crop_margin(cfg.source_size, cfg.image_size);
    let cropped = cfg.source_size - 2 * margin;
    Ok(Subject {
        id,
        style: style.id,
        spacing: cfg.spacing * cropped as f64 / cfg.image_size as f64,
        size: cfg.image_size,
        images,
        masks,
        evaluation_only: role == DomainRole::Target,
    })
}

pub fn generate_domain(cfg: &DatasetConfig, role: DomainRole, master_seed: u64) -> Result<Vec<Subject>> {
    let (count, style) = match role {
        DomainRole::Reference => (cfg.reference_subjects, StyleId::Reference),
        DomainRole::Target => (cfg.target_subjects, cfg.target_style),
    };
    let style = DomainStyle::preset(style);
    (0..count)
        .map(|i| generate_subject(cfg, role, i, &style, master_seed))
        .collect()
}

/// Subject ids assigned to each partition of one domain.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DomainSplit {
    fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub reference: DomainSplit,
    pub target: DomainSplit,
}

/// Shares `n` items by `ratios`; each share is floored and the remainder
/// goes to the first (training) share.
pub fn apportion(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    let mut shares: Vec<usize> = ratios.iter().map(|r| n * r / total).collect();
    let assigned: usize = shares.iter().sum();
    shares[0] += n - assigned;
    shares
}

const REFERENCE_RATIO: [usize; 2] = [50, 10];
const TARGET_RATIO: [usize; 3] = [35, 5, 20];

fn split_domain(role: DomainRole, n: usize, ratios: &[usize], seed: u64) -> Result<DomainSplit> {
    let shares = apportion(n, ratios);
    if shares.contains(&0) {
        return Err(invalid(format!(
            "{n} {} subjects are not enough for a {ratios:?} split",
            role.dir_name()
        )));
    }
    let mut ids: Vec<String> = (0..n).map(|i| format!("{}_{i:03}", role.dir_name())).collect();
    ids.shuffle(&mut rng_from_seed(derive_seed(seed, &[role.tag()])));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut it = ids.into_iter();
    for (p, &k) in parts.iter_mut().zip(&shares) {
        p.extend(it.by_ref().take(k));
        p.sort();
    }
    let [train, val, test] = parts;
    Ok(DomainSplit { train, val, test })
}

pub fn build_splits(reference_subjects: usize, target_subjects: usize, seed: u64) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        reference: split_domain(DomainRole::Reference, reference_subjects, &REFERENCE_RATIO, seed)?,
        target: split_domain(DomainRole::Target, target_subjects, &TARGET_RATIO, seed)?,
    })
}

impl DatasetSplit {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (role, d) in [("reference", &self.reference), ("target", &self.target)] {
            for (part, ids) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                let _ = writeln!(s, "{role} {part}{}", ids.iter().map(|i| format!(" {i}")).collect::<String>());
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut out = DatasetSplit::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut f = line.split_whitespace();
            let d = match f.next() {
                Some("reference") => &mut out.reference,
                Some("target") => &mut out.target,
                _ => return Err(Error::Format(format!("bad split line {line:?}"))),
            };
            let part = match f.next() {
                Some("train") => &mut d.train,
                Some("val") => &mut d.val,
                Some("test") => &mut d.test,
                _ => return Err(Error::Format(format!("bad split line {line:?}"))),
            };
            part.extend(f.map(str::to_string));
        }
        Ok(out)
    }

    /// Checks that no subject id appears in two partitions.
    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<&String> = self.reference.all().chain(self.target.all()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        all.len() == n
    }
}

const MANIFEST: &str = "manifest.txt";

/// Writes subjects as `<id>.image.susn` / `<id>.mask.susn` plus a manifest
/// (`subject style spacing slices size` per line).
pub fn save_domain(dir: &Path, subjects: &[Subject]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("# subject style spacing_mm slices size\n");
    for s in subjects {
        let img = s.image_tensor::<f32>();
        io::save(dir.join(format!("{}.image.susn", s.id)), &[Entry::tensor("image", &img, DType::F32)])?;
        let shape = Shape::new(s.slice_count(), 1, s.size, s.size);
        let labels = s.masks.concat();
        io::save(dir.join(format!("{}.mask.susn", s.id)), &[Entry::labels("mask", shape, labels)])?;
        let _ = writeln!(manifest, "{} {} {} {} {}", s.id, s.style, s.spacing, s.slice_count(), s.size);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads every subject listed in the manifest of `dir`.
pub fn load_domain(dir: &Path, role: DomainRole) -> Result<Vec<Subject>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, style, spacing, slices, size] = f[..] else {
            return Err(Error::Format(format!("bad manifest line {line:?}")));
        };
        let parse = |v: &str| v.parse::<usize>().map_err(|e| Error::Format(format!("{line:?}: {e}")));
        let (slices, size) = (parse(slices)?, parse(size)?);
        let spacing: f64 = spacing.parse().map_err(|e| Error::Format(format!("{line:?}: {e}")))?;
        let img = single(io::load(dir.join(format!("{id}.image.susn")))?, "image")?.to_tensor::<f64>()?;
        let mask_entry = single(io::load(dir.join(format!("{id}.mask.susn")))?, "mask")?;
        let want = Shape::new(slices, 1, size, size);
        if img.shape() != want || mask_entry.shape != want {
            return Err(Error::Format(format!("{id}: stored shapes disagree with manifest")));
        }
        let plane = size * size;
        let labels = mask_entry.as_labels()?;
        out.push(Subject {
            id: id.to_string(),
            style: style.parse()?,
            spacing,
            size,
            images: img.data().chunks(plane).map(<[f64]>::to_vec).collect(),
            masks: labels.chunks(plane).map(<[u8]>::to_vec).collect(),
            evaluation_only: role == DomainRole::Target,
        });
    }
    Ok(out)
}

fn single(entries: Vec<Entry>, name: &str) -> Result<Entry> {
    entries
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("missing entry {name}")))
}

/// Picks the subjects named in `ids`, in that order.
pub fn select<'a>(subjects: &'a [Subject], ids: &[String]) -> Result<Vec<&'a Subject>> {
    ids.iter()
        .map(|id| {
            subjects
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Format(format!("subject {id} not in dataset")))
        })
        .collect()
}
