//! Patch corpus handling: the sheet-based on-disk layout, per-patch
//! normalization, and the on-the-fly triplet and pair samplers that feed
//! training.
//!
//! On disk a corpus is a directory of 1024×1024 grayscale sheet images
//! (`patches*.bmp` or `.png`), each holding a 16×16 grid of 64×64 patches,
//! plus an `info.txt` whose i-th line starts with patch i's 3D point id.
//! Patches are indexed 0..N−1 in sheet-then-row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::PairLabel;
use crate::tensor::Tensor;

/// Stored patch side length.
pub const PATCH_SIZE: usize = 64;
/// Sheet side length in pixels.
pub const SHEET_SIZE: usize = 1024;
/// Patches per sheet row/column.
pub const SHEET_GRID: usize = SHEET_SIZE / PATCH_SIZE;
/// Patches per full sheet.
pub const PATCHES_PER_SHEET: usize = SHEET_GRID * SHEET_GRID;
/// Network input side length after normalization.
pub const INPUT_SIZE: usize = PATCH_SIZE / 2;

const INFO_FILE: &str = "info.txt";
const SIGMA_FLOOR: f32 = 1e-6;

/// One grayscale patch and the 3D point it was observed from.
#[derive(Clone, Debug)]
pub struct PatchRecord {
    /// Index of this patch in its corpus.
    pub patch_id: usize,
    /// Identity of the physical scene point; patches sharing it match.
    pub point_id: u32,
    pixels: Vec<u8>,
}

impl PatchRecord {
    pub fn new(patch_id: usize, point_id: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != PATCH_SIZE * PATCH_SIZE {
            return Err(Error::shape(
                "patch record",
                "pixel count",
                PATCH_SIZE * PATCH_SIZE,
                pixels.len(),
            ));
        }
        Ok(PatchRecord {
            patch_id,
            point_id,
            pixels,
        })
    }

    /// Pixels as a `[1, 64, 64]` tensor in `[0, 1]`.
    pub fn pixels(&self) -> Tensor<f32> {
        Tensor::from_fn(&[1, PATCH_SIZE, PATCH_SIZE], |i| {
            self.pixels[i] as f32 / 255.0
        })
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// An indexed, immutable collection of patches grouped by 3D point.
#[derive(Clone, Debug)]
pub struct Corpus {
    records: Vec<PatchRecord>,
    groups: BTreeMap<u32, Vec<usize>>,
}

impl Corpus {
    pub fn from_records(records: Vec<PatchRecord>) -> Self {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(r.point_id).or_default().push(i);
        }
        Corpus { records, groups }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, i: usize) -> &PatchRecord {
        &self.records[i]
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn point_count(&self) -> usize {
        self.groups.len()
    }

    /// Patch indices belonging to one point, in load order.
    pub fn group(&self, point_id: u32) -> &[usize] {
        self.groups.get(&point_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Points with at least two patches, i.e. those that can supply a
    /// positive pair.
    pub fn matchable_points(&self) -> Vec<u32> {
        self.groups
            .iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(&k, _)| k)
            .collect()
    }

    /// The normalized network input for patch `i`.
    pub fn normalized_patch(&self, i: usize) -> Tensor<f32> {
        normalize_patch(&self.records[i].pixels()).expect("stored patches are 64x64")
    }

    /// Stacks normalized patches into one `[B, 1, 32, 32]` batch.
    pub fn normalized_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::invalid("normalized batch", "empty index list"));
        }
        let per = INPUT_SIZE * INPUT_SIZE;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.records.len() {
                return Err(Error::invalid(
                    "normalized batch",
                    format!("patch index {i} out of range (corpus has {})", self.len()),
                ));
            }
            data.extend_from_slice(self.normalized_patch(i).data());
        }
        Tensor::from_vec(&[indices.len(), 1, INPUT_SIZE, INPUT_SIZE], data)
    }
}

/// 2×2 average downsample followed by per-patch standardization to zero
/// mean and unit deviation (σ clamped at 1e−6, so a constant patch maps to
/// all zeros rather than dividing by zero).
pub fn normalize_patch(pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::invalid(
            "normalize patch",
            format!("expected shape [1, H, W], got {shape:?}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "normalize patch",
            format!("extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = pixels.data();
    let mut out = vec![0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let a = src[(2 * y) * w + 2 * x];
            let b = src[(2 * y) * w + 2 * x + 1];
            let c = src[(2 * y + 1) * w + 2 * x];
            let d = src[(2 * y + 1) * w + 2 * x + 1];
            out[y * ow + x] = (a + b + c + d) / 4.0;
        }
    }
    // Statistics in f64: a constant patch must come out exactly zero, and
    // f32 summation noise alone would blow up under the tiny sigma floor.
    let n = out.len() as f64;
    let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = out
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    let sigma = (var.sqrt() as f32).max(SIGMA_FLOOR);
    let mean = mean as f32;
    for v in &mut out {
        *v = (*v - mean) / sigma;
    }
    Tensor::from_vec(&[1, oh, ow], out)
}

/// Loads a corpus from the sheet directory layout.
pub fn load_phototour(dir: &Path) -> Result<Corpus> {
    let info_path = dir.join(INFO_FILE);
    if !info_path.exists() {
        return Err(Error::format(&info_path, "missing info file"));
    }
    let info = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let mut point_ids = Vec::new();
    for (lineno, line) in info.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let first = line.split_whitespace().next().unwrap();
        let id: u32 = first.parse().map_err(|_| {
            Error::parse(
                &info_path,
                lineno + 1,
                format!("expected an integer point id, got {first:?}"),
            )
        })?;
        point_ids.push(id);
    }

    let mut sheet_paths = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext_ok = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("bmp") | Some("png")
        );
        if name.starts_with("patches") && ext_ok {
            sheet_paths.push(path);
        }
    }
    sheet_paths.sort();

    let capacity = sheet_paths.len() * PATCHES_PER_SHEET;
    if point_ids.len() > capacity {
        return Err(Error::format(
            dir,
            format!(
                "info lists {} patches but {} sheet(s) hold at most {capacity}",
                point_ids.len(),
                sheet_paths.len()
            ),
        ));
    }
    if !sheet_paths.is_empty() && point_ids.len() + PATCHES_PER_SHEET <= capacity {
        return Err(Error::format(
            dir,
            format!(
                "info lists {} patches but {} sheet(s) were found; at least one sheet is unused",
                point_ids.len(),
                sheet_paths.len()
            ),
        ));
    }

    let mut records = Vec::with_capacity(point_ids.len());
    'outer: for (sheet_idx, sheet_path) in sheet_paths.iter().enumerate() {
        let img = image::open(sheet_path)
            .map_err(|e| Error::format(sheet_path, format!("unreadable image: {e}")))?
            .into_luma8();
        if img.width() as usize != SHEET_SIZE || img.height() as usize != SHEET_SIZE {
            return Err(Error::format(
                sheet_path,
                format!(
                    "sheet must be {SHEET_SIZE}x{SHEET_SIZE}, got {}x{}",
                    img.width(),
                    img.height()
                ),
            ));
        }
        let raw = img.as_raw();
        for cell in 0..PATCHES_PER_SHEET {
            let patch_id = sheet_idx * PATCHES_PER_SHEET + cell;
            if patch_id >= point_ids.len() {
                break 'outer;
            }
            let cy = (cell / SHEET_GRID) * PATCH_SIZE;
            let cx = (cell % SHEET_GRID) * PATCH_SIZE;
            let mut pixels = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
            for y in 0..PATCH_SIZE {
                let start = (cy + y) * SHEET_SIZE + cx;
                pixels.extend_from_slice(&raw[start..start + PATCH_SIZE]);
            }
            records.push(PatchRecord::new(patch_id, point_ids[patch_id], pixels)?);
        }
    }

    Ok(Corpus::from_records(records))
}

/// Writes a corpus back out in the sheet directory layout, the inverse of
/// [`load_phototour`]. Sheets are PNG; unused cells in the last sheet stay
/// black.
pub fn write_corpus_sheets(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sheets = corpus.len().div_ceil(PATCHES_PER_SHEET);
    for sheet_idx in 0..sheets {
        let mut img = image::GrayImage::new(SHEET_SIZE as u32, SHEET_SIZE as u32);
        for cell in 0..PATCHES_PER_SHEET {
            let patch_id = sheet_idx * PATCHES_PER_SHEET + cell;
            if patch_id >= corpus.len() {
                break;
            }
            let cy = (cell / SHEET_GRID) * PATCH_SIZE;
            let cx = (cell % SHEET_GRID) * PATCH_SIZE;
            let pixels = corpus.record(patch_id).raw_pixels();
            for y in 0..PATCH_SIZE {
                for x in 0..PATCH_SIZE {
                    img.put_pixel(
                        (cx + x) as u32,
                        (cy + y) as u32,
                        image::Luma([pixels[y * PATCH_SIZE + x]]),
                    );
                }
            }
        }
        let path = dir.join(format!("patches{sheet_idx:04}.png"));
        img.save(&path)
            .map_err(|e| Error::format(&path, format!("cannot write sheet: {e}")))?;
    }
    let mut info = String::new();
    for r in corpus.records() {
        info.push_str(&format!("{} 0\n", r.point_id));
    }
    let info_path = dir.join(INFO_FILE);
    fs::write(&info_path, info).map_err(|e| Error::io(&info_path, e))
}

/// A labeled evaluation or training pair of patch indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledPair {
    pub left: usize,
    pub right: usize,
    pub label: PairLabel,
}

/// Parses a pair list: whitespace rows of
/// `patchID1 pointID1 _ patchID2 pointID2 _`, labeled positive exactly when
/// the point ids agree. Ids are validated against the corpus size.
pub fn load_pairs_file(path: &Path, corpus_len: usize) -> Result<Vec<LabeledPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 6 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 6 fields, got {}", tokens.len()),
            ));
        }
        let field = |idx: usize| -> Result<i64> {
            tokens[idx].parse().map_err(|_| {
                Error::parse(
                    path,
                    lineno + 1,
                    format!("field {} is not an integer: {:?}", idx + 1, tokens[idx]),
                )
            })
        };
        let left = field(0)?;
        let point_left = field(1)?;
        let right = field(3)?;
        let point_right = field(4)?;
        for (name, id) in [("patchID1", left), ("patchID2", right)] {
            if id < 0 || id as usize >= corpus_len {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("{name} {id} outside corpus of {corpus_len} patches"),
                ));
            }
        }
        let label = if point_left == point_right {
            PairLabel::Positive
        } else {
            PairLabel::Negative
        };
        pairs.push(LabeledPair {
            left: left as usize,
            right: right as usize,
            label,
        });
    }
    Ok(pairs)
}

/// One training triplet: two patches of the same point and one from a
/// different point, as corpus indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub p1: usize,
    pub p2: usize,
    pub n: usize,
}

fn sampler_preconditions(corpus: &Corpus, matchable: &[u32]) -> Result<()> {
    if matchable.is_empty() {
        return Err(Error::invalid(
            "sampler",
            "corpus has no matchable point (a point with >= 2 patches)",
        ));
    }
    if corpus.point_count() < 2 {
        return Err(Error::invalid(
            "sampler",
            "corpus has only one point group; negatives are impossible",
        ));
    }
    Ok(())
}

/// Endless stream of random triplets: a positive pair drawn from a uniform
/// matchable point, completed with a uniformly drawn patch of any other
/// point. Deterministic per seed.
pub struct TripletSampler<'a> {
    corpus: &'a Corpus,
    matchable: Vec<u32>,
    rng: ChaCha8Rng,
}

impl<'a> TripletSampler<'a> {
    pub fn new(corpus: &'a Corpus, seed: u64) -> Result<Self> {
        Self::with_stream(corpus, seed, 0)
    }

    /// Same seed, independent stream: workers and epochs derive their own
    /// streams by fixed offset instead of sharing one RNG.
    pub fn with_stream(corpus: &'a Corpus, seed: u64, stream: u64) -> Result<Self> {
        let matchable = corpus.matchable_points();
        sampler_preconditions(corpus, &matchable)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(TripletSampler {
            corpus,
            matchable,
            rng,
        })
    }

    fn next_triplet(&mut self) -> Triplet {
        let point = self.matchable[self.rng.gen_range(0..self.matchable.len())];
        let group = self.corpus.group(point);
        let i = self.rng.gen_range(0..group.len());
        let mut j = self.rng.gen_range(0..group.len() - 1);
        if j >= i {
            j += 1;
        }
        // Negative: uniform over all patches of other points, by rejection.
        let n = loop {
            let cand = self.rng.gen_range(0..self.corpus.len());
            if self.corpus.record(cand).point_id != point {
                break cand;
            }
        };
        Triplet {
            p1: group[i],
            p2: group[j],
            n,
        }
    }
}

impl Iterator for TripletSampler<'_> {
    type Item = Triplet;

    fn next(&mut self) -> Option<Triplet> {
        Some(self.next_triplet())
    }
}

pub fn sample_triplets(corpus: &Corpus, count: usize, seed: u64) -> Result<Vec<Triplet>> {
    Ok(TripletSampler::new(corpus, seed)?.take(count).collect())
}

/// Endless stream of labeled pairs mirroring the triplet decomposition:
/// positives are a matchable point's distinct patch pair, negatives join
/// two different points. The default positive fraction of 1/3 matches one
/// positive and two negative distances per triplet.
pub struct PairSampler<'a> {
    corpus: &'a Corpus,
    matchable: Vec<u32>,
    positive_fraction: f64,
    rng: ChaCha8Rng,
}

pub const DEFAULT_POSITIVE_FRACTION: f64 = 1.0 / 3.0;

impl<'a> PairSampler<'a> {
    pub fn new(corpus: &'a Corpus, seed: u64, positive_fraction: f64) -> Result<Self> {
        Self::with_stream(corpus, seed, 0, positive_fraction)
    }

    pub fn with_stream(
        corpus: &'a Corpus,
        seed: u64,
        stream: u64,
        positive_fraction: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&positive_fraction) {
            return Err(Error::invalid(
                "pair sampler",
                format!("positive fraction must be in [0, 1], got {positive_fraction}"),
            ));
        }
        let matchable = corpus.matchable_points();
        sampler_preconditions(corpus, &matchable)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(PairSampler {
            corpus,
            matchable,
            positive_fraction,
            rng,
        })
    }

    fn next_pair(&mut self) -> LabeledPair {
        if self.rng.gen_range(0.0..1.0) < self.positive_fraction {
            let point = self.matchable[self.rng.gen_range(0..self.matchable.len())];
            let group = self.corpus.group(point);
            let i = self.rng.gen_range(0..group.len());
            let mut j = self.rng.gen_range(0..group.len() - 1);
            if j >= i {
                j += 1;
            }
            LabeledPair {
                left: group[i],
                right: group[j],
                label: PairLabel::Positive,
            }
        } else {
            let left = self.rng.gen_range(0..self.corpus.len());
            let left_point = self.corpus.record(left).point_id;
            let right = loop {
                let cand = self.rng.gen_range(0..self.corpus.len());
                if self.corpus.record(cand).point_id != left_point {
                    break cand;
                }
            };
            LabeledPair {
                left,
                right,
                label: PairLabel::Negative,
            }
        }
    }
}

impl Iterator for PairSampler<'_> {
    type Item = LabeledPair;

    fn next(&mut self) -> Option<LabeledPair> {
        Some(self.next_pair())
    }
}

pub fn sample_pairs(
    corpus: &Corpus,
    count: usize,
    seed: u64,
    positive_fraction: f64,
) -> Result<Vec<LabeledPair>> {
    Ok(PairSampler::new(corpus, seed, positive_fraction)?
        .take(count)
        .collect())
}
