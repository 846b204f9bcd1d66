use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthgen::lexicon::Lexicon;
use crate::synthgen::pgm;
use crate::synthgen::render::{render_word, Canvas, GrayImage, StyleParams};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT: &str = "scriptbridge-manifest/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdEval,
    /// Distortion-heavy split used by the second training stage.
    Finetune,
    OodEval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::IdEval, Split::Finetune, Split::OodEval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdEval => "id_eval",
            Split::Finetune => "finetune",
            Split::OodEval => "ood_eval",
        }
    }

    /// Splits drawn from the widened distortion ranges.
    pub fn is_widened(self) -> bool {
        matches!(self, Split::Finetune | Split::OodEval)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown split `{s}` (expected train, id_eval, finetune or ood_eval)"
                ))
            })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open range of style ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleRange {
    pub start: u32,
    pub end: u32,
}

impl StyleRange {
    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: u32) -> bool {
        (self.start..self.end).contains(&id)
    }

    fn overlaps(&self, other: &StyleRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSplitSpec {
    pub train: StyleRange,
    pub id_eval: StyleRange,
    pub finetune: StyleRange,
    pub ood_eval: StyleRange,
}

impl Default for StyleSplitSpec {
    fn default() -> Self {
        StyleSplitSpec {
            train: StyleRange { start: 0, end: 15 },
            id_eval: StyleRange { start: 15, end: 20 },
            finetune: StyleRange { start: 20, end: 80 },
            ood_eval: StyleRange { start: 80, end: 88 },
        }
    }
}

impl StyleSplitSpec {
    pub fn range(&self, split: Split) -> StyleRange {
        match split {
            Split::Train => self.train,
            Split::IdEval => self.id_eval,
            Split::Finetune => self.finetune,
            Split::OodEval => self.ood_eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in Split::ALL {
            if self.range(s).is_empty() {
                return Err(Error::StyleSplit(format!("{s} style range is empty")));
            }
        }
        for (i, a) in Split::ALL.iter().enumerate() {
            for b in &Split::ALL[i + 1..] {
                if self.range(*a).overlaps(&self.range(*b)) {
                    return Err(Error::StyleSplit(format!(
                        "{a} and {b} style ranges overlap"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Samples per (semantic id, language) in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub id_eval: usize,
    pub finetune: usize,
    pub ood_eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 10,
            id_eval: 5,
            finetune: 20,
            ood_eval: 5,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::IdEval => self.id_eval,
            Split::Finetune => self.finetune,
            Split::OodEval => self.ood_eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub canvas: Canvas,
    pub per_class_per_lang: SplitSizes,
    pub styles: StyleSplitSpec,
    /// Factor applied to the wobble and noise ranges of the finetune and
    /// OOD splits.
    pub distortion_widen: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            canvas: Canvas::default(),
            per_class_per_lang: SplitSizes::default(),
            styles: StyleSplitSpec::default(),
            distortion_widen: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub text: String,
    pub semantic_id: usize,
    pub language: String,
    pub style_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub lexicon: Lexicon,
    pub seed: u64,
    pub canvas: Canvas,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy of the dataset restricted to one split.
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            lexicon: self.lexicon.clone(),
            seed: self.seed,
            canvas: self.canvas,
            samples: self
                .samples
                .iter()
                .filter(|s| s.split == split)
                .cloned()
                .collect(),
        }
    }

    /// Restriction to samples of the given languages.
    pub fn with_languages(&self, langs: &[&str]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| langs.contains(&s.language.as_str()))
                .cloned()
                .collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            lexicon: self.lexicon.clone(),
            seed: self.seed,
            canvas: self.canvas,
            samples: Vec::new(),
        }
    }

    /// Sample tallies keyed by split then language.
    pub fn counts(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.split.to_string())
                .or_default()
                .entry(s.language.clone())
                .or_default() += 1;
        }
        out
    }
}

/// Renders every sample in memory. The result is a pure function of
/// `(lexicon, cfg)`; sample `k` uses an RNG stream keyed by `(seed, k)`.
pub fn synthesize(lexicon: &Lexicon, cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.styles.validate()?;
    if !(cfg.distortion_widen >= 1.0) {
        return Err(Error::Config(format!(
            "distortion_widen must be >= 1, got {}",
            cfg.distortion_widen
        )));
    }
    let langs = lexicon.languages();
    let mut samples = Vec::new();
    let mut record = 0u64;
    for split in Split::ALL {
        let n = cfg.per_class_per_lang.get(split);
        let range = cfg.styles.range(split);
        let widen = if split.is_widened() {
            cfg.distortion_widen
        } else {
            1.0
        };
        for y in 0..lexicon.num_classes() {
            for (li, lang) in langs.iter().enumerate() {
                let text = lexicon.word(y, lang)?;
                for k in 0..n {
                    let slot = ((y * langs.len() + li) * n + k) as u32;
                    let style_id = range.start + slot % range.len();
                    let style = StyleParams::for_style(style_id, cfg.seed, widen);
                    let image = render_word(
                        text,
                        lang,
                        &style,
                        cfg.canvas,
                        seed::mix(&[cfg.seed, record]),
                    )?;
                    samples.push(Sample {
                        image,
                        text: text.to_string(),
                        semantic_id: y,
                        language: lang.clone(),
                        style_id,
                        split,
                    });
                    record += 1;
                }
            }
        }
    }
    Ok(Dataset {
        lexicon: lexicon.clone(),
        seed: cfg.seed,
        canvas: cfg.canvas,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub seed: u64,
    pub num_classes: usize,
    pub languages: Vec<String>,
    pub lexicon: Vec<Vec<String>>,
    pub canvas: Canvas,
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// SHA-256 over the record lines (each of which carries its image hash).
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub text: String,
    pub semantic_id: usize,
    pub language: String,
    pub style_id: u32,
    pub split: Split,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn records_checksum(records: &[ManifestRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_string(r)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Builds the manifest and the encoded images without touching the disk.
pub fn build_manifest(ds: &Dataset) -> Result<(DatasetManifest, Vec<Vec<u8>>)> {
    let mut records = Vec::with_capacity(ds.len());
    let mut blobs = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let bytes = pgm::encode(&s.image);
        records.push(ManifestRecord {
            image: format!("images/{i:06}.pgm"),
            text: s.text.clone(),
            semantic_id: s.semantic_id,
            language: s.language.clone(),
            style_id: s.style_id,
            split: s.split,
            sha256: sha256_hex(&bytes),
        });
        blobs.push(bytes);
    }
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        seed: ds.seed,
        num_classes: ds.lexicon.num_classes(),
        languages: ds.lexicon.languages().to_vec(),
        lexicon: ds.lexicon.words().to_vec(),
        canvas: ds.canvas,
        counts: ds.counts(),
        checksum: records_checksum(&records)?,
    };
    Ok((DatasetManifest { header, records }, blobs))
}

/// Renders the dataset into `out_dir` (images plus `manifest.jsonl`).
///
/// The directory is assembled under a temporary name and renamed into place,
/// so an interrupted run leaves no readable partial dataset. An existing
/// non-empty `out_dir` is never modified.
pub fn generate_dataset(
    lexicon: &Lexicon,
    cfg: &DatasetConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty {
            return Err(Error::io(
                out_dir,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "dataset directory exists and is not empty",
                ),
            ));
        }
    }
    let ds = synthesize(lexicon, cfg)?;
    write_dataset(&ds, out_dir)
}

pub fn write_dataset(ds: &Dataset, out_dir: &Path) -> Result<DatasetManifest> {
    let (manifest, blobs) = build_manifest(ds)?;
    let staging = staging_dir(out_dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let images = staging.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (r, bytes) in manifest.records.iter().zip(&blobs) {
        let p = staging.join(&r.image);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let mpath = staging.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_jsonl()?).map_err(|e| Error::io(&mpath, e))?;
    if out_dir.exists() {
        fs::remove_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(manifest)
}

fn staging_dir(out_dir: &Path) -> PathBuf {
    let name = out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    out_dir.with_file_name(format!(".{name}.partial"))
}

/// Reads and fully validates a dataset written by [`generate_dataset`].
/// Accepts either the manifest path or its directory.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines();
    let header: ManifestHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::Validation("manifest is empty".into()))?,
    )
    .map_err(|e| Error::Validation(format!("manifest header: {e}")))?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::Validation(format!(
            "unsupported manifest format `{}`",
            header.format
        )));
    }
    let lexicon = Lexicon::from_words(header.languages.clone(), header.lexicon.clone())?;
    if lexicon.num_classes() != header.num_classes {
        return Err(Error::Validation(
            "header class count disagrees with lexicon".into(),
        ));
    }

    let mut records = Vec::new();
    let mut samples = Vec::new();
    for (index, line) in lines.enumerate() {
        let bad = |message: String| Error::Record { index, message };
        let r: ManifestRecord =
            serde_json::from_str(line).map_err(|e| bad(format!("malformed record: {e}")))?;
        let expected = lexicon
            .word(r.semantic_id, &r.language)
            .map_err(|e| bad(e.to_string()))?;
        if expected != r.text {
            return Err(bad(format!(
                "text `{}` does not match lexicon word `{expected}`",
                r.text
            )));
        }
        let path = base.join(&r.image);
        let bytes = fs::read(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if sha256_hex(&bytes) != r.sha256 {
            return Err(bad(format!("{}: checksum mismatch", path.display())));
        }
        let image = pgm::decode(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if image.height != header.canvas.height || image.width != header.canvas.width {
            return Err(bad(format!("{}: unexpected image size", path.display())));
        }
        samples.push(Sample {
            image,
            text: r.text.clone(),
            semantic_id: r.semantic_id,
            language: r.language.clone(),
            style_id: r.style_id,
            split: r.split,
        });
        records.push(r);
    }

    if records_checksum(&records)? != header.checksum {
        return Err(Error::Validation(
            "manifest content checksum mismatch".into(),
        ));
    }
    let ds = Dataset {
        lexicon,
        seed: header.seed,
        canvas: header.canvas,
        samples,
    };
    if ds.counts() != header.counts {
        return Err(Error::Validation(
            "header counts disagree with record tallies".into(),
        ));
    }
    Ok(ds)
}

/// Manifest path inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Checks the structural dataset invariants: balance per `(y, l)` within a
/// split and pairwise-disjoint style ids across splits.
pub fn check_invariants(ds: &Dataset) -> Result<()> {
    let mut per: BTreeMap<(Split, usize, &str), usize> = BTreeMap::new();
    let mut styles: BTreeMap<Split, std::collections::BTreeSet<u32>> = BTreeMap::new();
    for s in &ds.samples {
        *per.entry((s.split, s.semantic_id, s.language.as_str()))
            .or_default() += 1;
        styles.entry(s.split).or_default().insert(s.style_id);
    }
    for split in Split::ALL {
        let counts: Vec<usize> = per
            .iter()
            .filter(|((sp, ..), _)| *sp == split)
            .map(|(_, &n)| n)
            .collect();
        if let (Some(min), Some(max)) = (counts.iter().min(), counts.iter().max()) {
            if min != max {
                return Err(Error::Validation(format!("split {split} is unbalanced")));
            }
        }
    }
    let splits: Vec<_> = styles.keys().copied().collect();
    for (i, a) in splits.iter().enumerate() {
        for b in &splits[i + 1..] {
            if !styles[a].is_disjoint(&styles[b]) {
                return Err(Error::Validation(format!("{a} and {b} share style ids")));
            }
        }
    }
    Ok(())
}
