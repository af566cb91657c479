//! On-disk dataset layout.
//!
//! ```text
//! <dir>/labels.csv
//! <dir>/images/<file>.png      8-bit grayscale
//! ```
//!
//! `labels.csv` starts with a task directive, then a header row, then one
//! row per sample:
//!
//! ```text
//! # task=classification num_classes=4
//! filename,split,target
//! img_00000.png,train,2
//! img_00001.png,test,0
//! ```
//!
//! Regression datasets use `# task=regression` and real-valued targets.
//! Filenames are plain names inside `images/` (no separators). Pixels are
//! read as `byte / 255`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Luma};

use super::dataset::{DatasetSplit, SplitName, TaskKind};
use super::image::{GrayImage, LabeledImage, Occlusion, Target};
use super::DataError;

pub const MANIFEST: &str = "labels.csv";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub split: SplitName,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub task: TaskKind,
    pub rows: Vec<ManifestRow>,
}

fn manifest_err(line: usize, reason: impl Into<String>) -> DataError {
    DataError::Manifest {
        line,
        reason: reason.into(),
    }
}

fn parse_directive(line: &str) -> Result<TaskKind, DataError> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| manifest_err(1, "expected `# task=...` directive"))?;
    let mut task = None;
    let mut classes = None;
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("task", v)) => task = Some(v.to_string()),
            Some(("num_classes", v)) => {
                classes = Some(
                    v.parse::<usize>()
                        .map_err(|_| manifest_err(1, format!("bad num_classes `{v}`")))?,
                )
            }
            _ => return Err(manifest_err(1, format!("unknown directive field `{field}`"))),
        }
    }
    match (task.as_deref(), classes) {
        (Some("classification"), Some(k)) if k >= 2 => Ok(TaskKind::Classification { num_classes: k }),
        (Some("classification"), _) => Err(manifest_err(1, "classification needs num_classes >= 2")),
        (Some("regression"), None) => Ok(TaskKind::Regression),
        _ => Err(manifest_err(1, "task must be `classification` or `regression`")),
    }
}

/// Parse the text of `labels.csv`. Targets are range-checked against the
/// task; errors name the offending file.
pub fn parse_manifest(text: &str) -> Result<Manifest, DataError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let task = parse_directive(first)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(rest.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| manifest_err(2, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["filename", "split", "target"] {
        return Err(manifest_err(2, "header must be `filename,split,target`"));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 3;
        let record = record.map_err(|e| manifest_err(line, e.to_string()))?;
        if record.len() != 3 {
            return Err(manifest_err(line, "expected 3 fields"));
        }
        let filename = record[0].to_string();
        if filename.is_empty()
            || filename.contains(['/', '\\'])
            || filename == "."
            || filename == ".."
        {
            return Err(manifest_err(line, format!("invalid filename `{filename}`")));
        }
        let split = SplitName::parse(&record[1])
            .ok_or_else(|| manifest_err(line, format!("unknown split `{}`", &record[1])))?;
        let raw = &record[2];
        let out_of_range = || DataError::LabelOutOfRange {
            file: filename.clone(),
            target: raw.to_string(),
        };
        let target = match task {
            TaskKind::Classification { num_classes } => {
                let k: usize = raw.parse().map_err(|_| out_of_range())?;
                if k >= num_classes {
                    return Err(out_of_range());
                }
                Target::ClassId(k)
            }
            TaskKind::Regression => {
                let v: f64 = raw.parse().map_err(|_| out_of_range())?;
                if !v.is_finite() {
                    return Err(out_of_range());
                }
                Target::AgeLike(v)
            }
        };
        rows.push(ManifestRow {
            filename,
            split,
            target,
        });
    }
    Ok(Manifest { task, rows })
}

/// Decode PNG bytes (any color type) into a grayscale image on `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<GrayImage, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    let pixels = luma.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(GrayImage::new(h, w, pixels))
}

/// Encode as 8-bit grayscale PNG, rounding to the nearest level.
pub fn encode_png(image: &GrayImage) -> Result<Vec<u8>, String> {
    let buf = image::ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(
        image.width as u32,
        image.height as u32,
        |x, y| {
            let v = image.pixels[y as usize * image.width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        },
    );
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

pub fn load_directory(path: &Path) -> Result<DatasetSplit, DataError> {
    let manifest_path = path.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|_| DataError::MissingManifest(manifest_path.display().to_string()))?;
    let manifest = parse_manifest(&text)?;
    let mut split = DatasetSplit {
        task: manifest.task,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for row in manifest.rows {
        let file = path.join(IMAGE_DIR).join(&row.filename);
        let bytes = std::fs::read(&file).map_err(|_| DataError::MissingFile(row.filename.clone()))?;
        let pixels = decode_png(&bytes).map_err(|reason| DataError::CorruptImage {
            file: row.filename.clone(),
            reason,
        })?;
        let img = LabeledImage {
            pixels,
            target: row.target,
            occlusion: Occlusion::None,
        };
        match row.split {
            SplitName::Train => split.train.push(img),
            SplitName::Validation => split.validation.push(img),
            SplitName::Test => split.test.push(img),
        }
    }
    split.validate()?;
    Ok(split)
}

fn format_target(t: Target) -> String {
    match t {
        Target::ClassId(k) => k.to_string(),
        // `{:?}` on f64 is the shortest string that parses back exactly.
        Target::AgeLike(v) => format!("{v:?}"),
    }
}

/// Write `split` in the directory layout. Output bytes depend only on the
/// split contents.
pub fn save_directory(split: &DatasetSplit, path: &Path) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io(path.display().to_string(), e.to_string());
    let images = path.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(io)?;
    let mut manifest = match split.task {
        TaskKind::Classification { num_classes } => {
            format!("# task=classification num_classes={num_classes}\n")
        }
        TaskKind::Regression => "# task=regression\n".to_string(),
    };
    manifest.push_str("filename,split,target\n");
    let mut counter = 0usize;
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        for img in split.split(name) {
            if img.occlusion != Occlusion::None {
                return Err(DataError::AlreadyOccluded(img.occlusion));
            }
            let filename = format!("img_{counter:05}.png");
            counter += 1;
            let bytes = encode_png(&img.pixels).map_err(|reason| DataError::CorruptImage {
                file: filename.clone(),
                reason,
            })?;
            std::fs::write(images.join(&filename), bytes).map_err(io)?;
            manifest.push_str(&format!(
                "{filename},{},{}\n",
                name.as_str(),
                format_target(img.target)
            ));
        }
    }
    std::fs::write(path.join(MANIFEST), manifest).map_err(io)?;
    Ok(())
}
