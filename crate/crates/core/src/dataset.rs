//! Frame-transcript manifest ingestion, split statistics and batching.
//!
//! The manifest is JSON-Lines, one record per line with keys exactly
//! `{id, split, topic, transcript, image, label, video_id}`. Labels are
//! SUPPORT / NEUTRAL / OPPOSE (case-insensitive). A synthetic fixture
//! generator ships here so the full suite runs without external data.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Three-way stance with stable integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StanceLabel {
    Support = 0,
    Oppose = 1,
    Neutral = 2,
}

pub const ALL_LABELS: [StanceLabel; 3] = [
    StanceLabel::Support,
    StanceLabel::Oppose,
    StanceLabel::Neutral,
];

impl StanceLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StanceLabel> {
        ALL_LABELS.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<StanceLabel> {
        match s.to_ascii_uppercase().as_str() {
            "SUPPORT" => Some(StanceLabel::Support),
            "OPPOSE" => Some(StanceLabel::Oppose),
            "NEUTRAL" => Some(StanceLabel::Neutral),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StanceLabel::Support => "SUPPORT",
            StanceLabel::Oppose => "OPPOSE",
            StanceLabel::Neutral => "NEUTRAL",
        }
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

pub const ALL_SPLITS: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One frame-transcript pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleRecord {
    pub id: String,
    pub split: Split,
    pub topic: String,
    pub transcript: String,
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub label: StanceLabel,
    pub video_id: String,
}

/// Manifest wire format; field order here is the canonical key order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    split: String,
    topic: String,
    transcript: String,
    image: String,
    label: String,
    video_id: String,
}

#[derive(Debug)]
pub struct ManifestLoad {
    pub records: Vec<ExampleRecord>,
    /// Non-fatal findings: empty manifest, images missing on disk.
    pub warnings: Vec<String>,
}

/// Load and validate a JSON-Lines manifest. Every hard error carries its
/// 1-based line number; missing image files are warnings, not failures.
pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let mut missing_images = 0usize;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{}:{lineno}: {e}", path.display())))?;

        let split = Split::parse(&raw.split).ok_or_else(|| {
            Error::data(format!(
                "{}:{lineno}: bad split tag '{}' (want train|dev|test)",
                path.display(),
                raw.split
            ))
        })?;
        let label = StanceLabel::parse(&raw.label).ok_or_else(|| {
            Error::data(format!(
                "{}:{lineno}: unknown label '{}' (want SUPPORT|NEUTRAL|OPPOSE)",
                path.display(),
                raw.label
            ))
        })?;
        if !seen_ids.insert(raw.id.clone()) {
            return Err(Error::data(format!(
                "{}:{lineno}: duplicate id '{}'",
                path.display(),
                raw.id
            )));
        }
        if raw.transcript.trim().is_empty() {
            return Err(Error::data(format!(
                "{}:{lineno}: empty transcript",
                path.display()
            )));
        }
        if raw.image.is_empty() {
            return Err(Error::data(format!(
                "{}:{lineno}: missing image path",
                path.display()
            )));
        }
        if !root.join(&raw.image).exists() {
            missing_images += 1;
            if missing_images <= 5 {
                warnings.push(format!(
                    "{}:{lineno}: image file not found: {}",
                    path.display(),
                    raw.image
                ));
            }
        }

        records.push(ExampleRecord {
            id: raw.id,
            split,
            topic: raw.topic,
            transcript: raw.transcript,
            image: raw.image,
            label,
            video_id: raw.video_id,
        });
    }

    if missing_images > 5 {
        warnings.push(format!("... and {} more missing images", missing_images - 5));
    }
    if records.is_empty() {
        warnings.push(format!("{}: empty manifest", path.display()));
    }
    Ok(ManifestLoad { records, warnings })
}

/// Canonical writer: fixed key order, one record per line. Loading the
/// output and writing it again is byte-identical.
pub fn write_manifest(records: &[ExampleRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let raw = RawRecord {
            id: r.id.clone(),
            split: r.split.as_str().to_string(),
            topic: r.topic.clone(),
            transcript: r.transcript.clone(),
            image: r.image.clone(),
            label: r.label.as_str().to_string(),
            video_id: r.video_id.clone(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-split, per-label counts plus distinct-video counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    /// `counts[split][label]` with splits ordered train/dev/test and labels
    /// by their integer codes (SUPPORT, OPPOSE, NEUTRAL).
    pub counts: [[u64; 3]; 3],
    pub totals: [u64; 3],
    pub videos: [u64; 3],
    pub grand_total: u64,
}

impl SplitStats {
    pub fn count(&self, split: Split, label: StanceLabel) -> u64 {
        self.counts[split as usize][label.index()]
    }

    pub fn total(&self, split: Split) -> u64 {
        self.totals[split as usize]
    }

    pub fn videos(&self, split: Split) -> u64 {
        self.videos[split as usize]
    }
}

pub fn compute_split_stats(records: &[ExampleRecord]) -> SplitStats {
    let mut counts = [[0u64; 3]; 3];
    let mut videos: [BTreeSet<&str>; 3] = Default::default();
    for r in records {
        counts[r.split as usize][r.label.index()] += 1;
        videos[r.split as usize].insert(&r.video_id);
    }
    let totals = [
        counts[0].iter().sum(),
        counts[1].iter().sum(),
        counts[2].iter().sum(),
    ];
    SplitStats {
        counts,
        totals,
        videos: [
            videos[0].len() as u64,
            videos[1].len() as u64,
            videos[2].len() as u64,
        ],
        grand_total: totals.iter().sum(),
    }
}

/// w_i = n_i / sum(n_j) over the given split's true label counts.
pub fn class_weights(stats: &SplitStats, split: Split) -> [f64; 3] {
    let total = stats.total(split) as f64;
    let mut w = [0.0; 3];
    for label in ALL_LABELS {
        w[label.index()] = stats.count(split, label) as f64 / total;
    }
    w
}

/// Deterministic batch index lists for one split. The train split is
/// shuffled by seed; dev/test keep manifest order. The final partial
/// batch is kept.
pub fn batches(
    records: &[ExampleRecord],
    batch_size: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    let mut indices: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::data(format!("split '{split}' is empty")));
    }
    if split == Split::Train {
        let mut rng = StreamRng::new(seed, "batches.train");
        rng.shuffle(&mut indices);
    }
    Ok(indices.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

// ---------------------------------------------------------------------
// Synthetic fixtures
// ---------------------------------------------------------------------

pub mod fixture {
    use super::*;
    use crate::encoders::image::write_ppm;

    /// Reference per-split layout: (split, videos, support, neutral, oppose).
    pub const REFERENCE_LAYOUT: [(Split, u64, u64, u64, u64); 3] = [
        (Split::Train, 80, 1449, 1036, 887),
        (Split::Dev, 10, 204, 83, 130),
        (Split::Test, 10, 194, 73, 153),
    ];

    pub const IMAGE_SIZE: usize = 64;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum FixtureKind {
        /// Full-size dataset with the reference split statistics.
        Reference,
        /// 60 separable training examples (plus small dev/test splits)
        /// for overfit sanity runs.
        Overfit,
    }

    #[derive(Debug, Clone)]
    pub struct FixtureSpec {
        pub kind: FixtureKind,
        pub seed: u64,
        pub with_images: bool,
    }

    impl Default for FixtureSpec {
        fn default() -> Self {
            FixtureSpec {
                kind: FixtureKind::Reference,
                seed: 42,
                with_images: true,
            }
        }
    }

    #[derive(Debug)]
    pub struct FixtureReport {
        pub manifest_path: PathBuf,
        pub records: Vec<ExampleRecord>,
        pub images_written: usize,
    }

    const TOPICS: [&str; 10] = [
        "climate change mitigation strategies",
        "arctic methane and climate change",
        "renewable energy transition",
        "sea level rise in coastal cities",
        "carbon capture technology",
        "climate policy and regulation",
        "extreme weather attribution",
        "deforestation and carbon sinks",
        "ocean acidification research",
        "climate adaptation planning",
    ];

    const SUPPORT_PHRASES: [&str; 3] = [
        "we must act on the evidence and support mitigation",
        "the science clearly supports urgent climate action",
        "adaptation and mitigation efforts deserve our support",
    ];
    const NEUTRAL_PHRASES: [&str; 3] = [
        "the measurements describe seasonal variation in the data",
        "this segment introduces the speaker and the topic",
        "energy arrives from the sun when sunlight hits the earth",
    ];
    const OPPOSE_PHRASES: [&str; 3] = [
        "there is no obvious dependence in this one day average",
        "these projections overstate the certainty of the models",
        "the proposed measures ignore the costs we already face",
    ];
    const FILLER: [&str; 12] = [
        "furthermore", "indeed", "notably", "however", "broadly", "locally", "globally",
        "recently", "arguably", "generally", "meanwhile", "ultimately",
    ];

    fn phrase_for(label: StanceLabel, pick: usize) -> &'static str {
        match label {
            StanceLabel::Support => SUPPORT_PHRASES[pick % SUPPORT_PHRASES.len()],
            StanceLabel::Neutral => NEUTRAL_PHRASES[pick % NEUTRAL_PHRASES.len()],
            StanceLabel::Oppose => OPPOSE_PHRASES[pick % OPPOSE_PHRASES.len()],
        }
    }

    /// Brightness bands keep the fixture weakly image-separable.
    fn base_brightness(label: StanceLabel) -> f64 {
        match label {
            StanceLabel::Support => 0.85,
            StanceLabel::Oppose => 0.15,
            StanceLabel::Neutral => 0.50,
        }
    }

    fn render_image(path: &Path, label: StanceLabel, rng: &mut StreamRng) -> Result<()> {
        let s = IMAGE_SIZE;
        let base = base_brightness(label);
        let jitter = (rng.next_f64() - 0.5) * 0.08;
        let mut rgb = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            for x in 0..s {
                // mild diagonal texture so patches differ
                let texture = (((x + y) % 16) as f64 / 16.0 - 0.5) * 0.06;
                let v = (base + jitter + texture).clamp(0.0, 1.0);
                let byte = (v * 255.0).round() as u8;
                rgb.extend_from_slice(&[byte, byte, byte]);
            }
        }
        write_ppm(path, s, s, &rgb)
    }

    fn make_records(
        split: Split,
        n_videos: u64,
        per_label: [(StanceLabel, u64); 3],
        seed: u64,
    ) -> Vec<ExampleRecord> {
        let mut labels: Vec<StanceLabel> = Vec::new();
        for (label, n) in per_label {
            labels.extend(std::iter::repeat_n(label, n as usize));
        }
        let mut rng = StreamRng::new(seed, &format!("fixture.{split}.labels"));
        rng.shuffle(&mut labels);

        let total = labels.len();
        let n_videos = n_videos as usize;
        let base = total / n_videos;
        let extra = total % n_videos;

        let mut records = Vec::with_capacity(total);
        let mut cursor = 0usize;
        let mut text_rng = StreamRng::new(seed, &format!("fixture.{split}.text"));
        for v in 0..n_videos {
            let frames = base + usize::from(v < extra);
            let video_id = format!("vid_{split}_{v:03}");
            let topic = TOPICS[v % TOPICS.len()];
            for f in 0..frames {
                let label = labels[cursor];
                cursor += 1;
                let filler_a = FILLER[text_rng.next_below(FILLER.len() as u64) as usize];
                let filler_b = FILLER[text_rng.next_below(FILLER.len() as u64) as usize];
                let transcript = format!(
                    "{filler_a} {} {filler_b} regarding {topic}",
                    phrase_for(label, f)
                );
                records.push(ExampleRecord {
                    id: format!("{video_id}_f{f:04}"),
                    split,
                    topic: topic.to_string(),
                    transcript,
                    image: format!("images/{video_id}/f{f:04}.ppm"),
                    label,
                    video_id: video_id.clone(),
                });
            }
        }
        records
    }

    /// Generate a manifest (and optionally images) under `dir`.
    pub fn generate(dir: &Path, spec: &FixtureSpec) -> Result<FixtureReport> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::new();
        match spec.kind {
            FixtureKind::Reference => {
                for (split, videos, s, n, o) in REFERENCE_LAYOUT {
                    records.extend(make_records(
                        split,
                        videos,
                        [
                            (StanceLabel::Support, s),
                            (StanceLabel::Neutral, n),
                            (StanceLabel::Oppose, o),
                        ],
                        spec.seed,
                    ));
                }
            }
            FixtureKind::Overfit => {
                for (split, videos, per) in [
                    (Split::Train, 6, 20u64),
                    (Split::Dev, 3, 3),
                    (Split::Test, 3, 3),
                ] {
                    records.extend(make_records(
                        split,
                        videos,
                        [
                            (StanceLabel::Support, per),
                            (StanceLabel::Neutral, per),
                            (StanceLabel::Oppose, per),
                        ],
                        spec.seed,
                    ));
                }
            }
        }

        let mut images_written = 0usize;
        if spec.with_images {
            let mut img_rng = StreamRng::new(spec.seed, "fixture.images");
            for r in &records {
                let path = dir.join(&r.image);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                render_image(&path, r.label, &mut img_rng)?;
                images_written += 1;
            }
        }

        let manifest_path = dir.join("manifest.jsonl");
        write_manifest(&records, &manifest_path)?;
        Ok(FixtureReport {
            manifest_path,
            records,
            images_written,
        })
    }
}
