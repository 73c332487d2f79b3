//! On-disk layout `root/{train,val,test}/{A,B,label}/<name>.png`: 8-bit RGB
//! pre (`A`) and post (`B`) images and an 8-bit grayscale label using
//! 0 for no change and 255 for change.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use cdkit_core::data::{BiTemporalSample, Image, Mask, SplitName};
use cdkit_core::train::SampleSource;
use image::{GrayImage, ImageReader, RgbImage};

/// Paths of one sample, checked to exist and agree in size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleFiles {
    pub stem: String,
    pub pre: PathBuf,
    pub post: PathBuf,
    pub label: PathBuf,
    pub size: (u32, u32),
}

/// One split's samples in sorted-name order; pixels load on demand.
#[derive(Clone, Debug, Default)]
pub struct SplitFiles {
    pub samples: Vec<SampleFiles>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub splits: BTreeMap<&'static str, SplitFiles>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> Option<&SplitFiles> {
        self.splits.get(name.as_str()).filter(|s| !s.samples.is_empty())
    }

    pub fn require(&self, name: SplitName) -> Result<&SplitFiles> {
        self.split(name).ok_or_else(|| anyhow!("dataset {} has no {} samples", self.root.display(), name.as_str()))
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .with_context(|| format!("opening {}", path.display()))?
        .into_dimensions()
        .with_context(|| format!("reading header of {}", path.display()))
}

fn scan_split(root: &Path, split: SplitName) -> Result<SplitFiles> {
    let base = root.join(split.as_str());
    let (a, b, l) = (png_stems(&base.join("A"))?, png_stems(&base.join("B"))?, png_stems(&base.join("label"))?);
    for stem in a.keys().chain(b.keys()).chain(l.keys()) {
        for (dir, set) in [("A", &a), ("B", &b), ("label", &l)] {
            if !set.contains_key(stem) {
                bail!("sample {stem} in {} has no {dir}/{stem}.png", base.display());
            }
        }
    }
    let mut samples = Vec::with_capacity(a.len());
    for (stem, pre) in a {
        let (post, label) = (b[&stem].clone(), l[&stem].clone());
        let size = dimensions(&pre)?;
        for p in [&post, &label] {
            let other = dimensions(p)?;
            ensure!(other == size, "{} is {}×{} but {} is {}×{}", p.display(), other.0, other.1, pre.display(), size.0, size.1);
        }
        samples.push(SampleFiles { stem, pre, post, label, size });
    }
    Ok(SplitFiles { samples })
}

/// Enumerates and validates the tree. Missing split directories are empty.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    ensure!(root.is_dir(), "dataset root {} is not a directory", root.display());
    let mut splits = BTreeMap::new();
    for name in SplitName::ALL {
        splits.insert(name.as_str(), scan_split(root, name)?);
    }
    ensure!(splits.values().any(|s| !s.samples.is_empty()), "no samples found under {}", root.display());
    Ok(Dataset { root: root.to_path_buf(), splits })
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .into_rgb8();
    Ok(Image::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())?)
}

/// Label PNG with values in {0, 255}; 255 becomes 1.
pub fn read_label(path: &Path) -> Result<Mask> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .into_luma8();
    let data = img
        .as_raw()
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(anyhow!("{}: label value {other} at pixel {i} is neither 0 nor 255", path.display())),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Mask::new(img.height() as usize, img.width() as usize, data)?)
}

pub fn read_sample(files: &SampleFiles) -> Result<BiTemporalSample> {
    Ok(BiTemporalSample::new(read_rgb(&files.pre)?, read_rgb(&files.post)?, read_label(&files.label)?)?)
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8()).expect("buffer matches size");
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Writes a binary mask as a {0, 255} grayscale PNG.
pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[u8]) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, mask.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect())
        .expect("buffer matches size");
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_sample(root: &Path, split: SplitName, stem: &str, sample: &BiTemporalSample) -> Result<()> {
    let base = root.join(split.as_str());
    for dir in ["A", "B", "label"] {
        fs::create_dir_all(base.join(dir)).with_context(|| format!("creating {}", base.join(dir).display()))?;
    }
    let file = format!("{stem}.png");
    write_rgb(&base.join("A").join(&file), &sample.pre)?;
    write_rgb(&base.join("B").join(&file), &sample.post)?;
    write_mask(&base.join("label").join(&file), sample.height(), sample.width(), &sample.label.data)
}

impl SampleSource for SplitFiles {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> cdkit_core::Result<BiTemporalSample> {
        let files = self
            .samples
            .get(index)
            .ok_or_else(|| cdkit_core::Error::invalid("sample", format!("index {index} out of range")))?;
        read_sample(files).map_err(|e| cdkit_core::Error::Source(format!("{e:#}")))
    }
}

/// Decodes a whole split up front.
pub fn read_split(split: &SplitFiles) -> Result<Vec<BiTemporalSample>> {
    split.samples.iter().map(read_sample).collect()
}
