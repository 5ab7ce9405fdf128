use super::{Dataset, Kind, SigImage, CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::error::{Error, Result};
use image::{GrayImage, Luma};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# sigattack dataset manifest v1";

/// A file or directory skipped while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadIssue {
    pub path: PathBuf,
    pub message: String,
}

/// Writes an ink-bright image as an 8-bit grayscale PNG in scan convention
/// (white paper, dark ink), i.e. stored value `round(255 · (1 − p))`.
pub fn save_png(image: &SigImage, path: &Path) -> Result<()> {
    let mut out = GrayImage::new(image.width as u32, image.height as u32);
    for (i, p) in image.pixels.iter().enumerate() {
        let v = (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8;
        out.put_pixel((i % image.width) as u32, (i / image.width) as u32, Luma([v]));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    out.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Reads a scan-convention PNG as an ink-bright image of the given size,
/// area-resampling when the stored size differs.
pub fn load_png_image(path: &Path, height: usize, width: usize) -> Result<SigImage> {
    SigImage::new(height, width, load_png(path, height, width)?)
}

fn load_png(path: &Path, height: usize, width: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("{}: empty image", path.display())));
    }
    let ink: Vec<f64> = img.pixels().map(|p| 1.0 - p.0[0] as f64 / 255.0).collect();
    Ok(if (h, w) == (height, width) {
        ink
    } else {
        area_resample(&ink, h, w, height, width)
    })
}

/// Box-filter resampling: each target pixel averages the source area it
/// covers, weighting partially covered source pixels by overlap.
pub(crate) fn area_resample(src: &[f64], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f64> {
    let spans = |s: usize, t: usize| -> Vec<Vec<(usize, f64)>> {
        let ratio = s as f64 / t as f64;
        (0..t)
            .map(|i| {
                let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
                let mut cells = Vec::new();
                let mut k = lo.floor() as usize;
                while (k as f64) < hi && k < s {
                    let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                    if overlap > 0.0 {
                        cells.push((k, overlap / (hi - lo)));
                    }
                    k += 1;
                }
                cells
            })
            .collect()
    };
    let (rows, cols) = (spans(sh, th), spans(sw, tw));
    let mut out = Vec::with_capacity(th * tw);
    for r in &rows {
        for c in &cols {
            let mut acc = 0.0;
            for &(y, wy) in r {
                for &(x, wx) in c {
                    acc += wy * wx * src[y * sw + x];
                }
            }
            out.push(acc.clamp(0.0, 1.0));
        }
    }
    out
}

/// Dataset metadata written next to the image tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `(writer, kind, sample, relative path)` per image.
    pub entries: Vec<(u32, Kind, u32, String)>,
}

fn relative_path(img: &SigImage) -> String {
    let tag = if img.kind == Kind::Genuine { 'g' } else { 'f' };
    format!("w{:03}/{}/{tag}{:02}.png", img.writer, img.kind.as_str(), img.sample)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{MANIFEST_HEADER}").unwrap();
    writeln!(text, "seed {}", manifest.seed).unwrap();
    writeln!(text, "canvas {} {}", manifest.height, manifest.width).unwrap();
    writeln!(text, "# writer kind sample path").unwrap();
    for (w, k, s, p) in &manifest.entries {
        writeln!(text, "{w} {} {s} {p}", k.as_str()).unwrap();
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: not a dataset manifest", path.display())));
    }
    let bad = |l: &str| Error::Format(format!("{}: bad manifest line {l:?}", path.display()));
    let (mut seed, mut canvas, mut entries) = (None, None, Vec::new());
    for line in lines.filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["seed", s] => seed = Some(s.parse().map_err(|_| bad(line))?),
            ["canvas", h, w] => {
                canvas = Some((h.parse().map_err(|_| bad(line))?, w.parse().map_err(|_| bad(line))?))
            }
            [w, k, s, p] => entries.push((
                w.parse().map_err(|_| bad(line))?,
                Kind::parse(k).ok_or_else(|| bad(line))?,
                s.parse().map_err(|_| bad(line))?,
                p.to_string(),
            )),
            _ => return Err(bad(line)),
        }
    }
    let (height, width) = canvas.ok_or_else(|| bad("<missing canvas>"))?;
    Ok(Manifest {
        seed: seed.ok_or_else(|| bad("<missing seed>"))?,
        height,
        width,
        entries,
    })
}

/// Writes every image as `<writer>/<kind>/<name>.png` plus the manifest.
/// Returns the number of PNG files written.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let rel = relative_path(img);
        save_png(img, &dir.join(&rel))?;
        entries.push((img.writer, img.kind, img.sample, rel));
    }
    write_manifest(
        &dir.join(MANIFEST_NAME),
        &Manifest {
            seed: dataset.seed,
            height: dataset.height,
            width: dataset.width,
            entries,
        },
    )?;
    Ok(dataset.images.len())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads a `<writer>/<genuine|forged>/<name>.png` tree.
///
/// Scans are inverted to ink-bright and resampled to the model canvas.
/// Writers are numbered in sorted directory order, samples in sorted file
/// order. Unreadable files and writers lacking a kind directory are reported
/// as issues and skipped; an empty result is an error.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Vec<LoadIssue>)> {
    let (h, w) = (CANVAS_HEIGHT, CANVAS_WIDTH);
    let mut issues = Vec::new();
    let mut images = Vec::new();
    let writer_dirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    for (writer, wdir) in writer_dirs.iter().enumerate() {
        let kinds = [Kind::Genuine, Kind::Forged].map(|k| (k, wdir.join(k.as_str())));
        if let Some((k, _)) = kinds.iter().find(|(_, p)| !p.is_dir()) {
            issues.push(LoadIssue {
                path: wdir.clone(),
                message: format!("missing {} directory; writer skipped", k.as_str()),
            });
            continue;
        }
        for (kind, kdir) in kinds {
            let files = sorted_entries(&kdir)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
            let mut sample = 0u32;
            for file in files {
                match load_png(&file, h, w) {
                    Ok(pixels) => {
                        images.push(SigImage {
                            height: h,
                            width: w,
                            pixels,
                            writer: writer as u32,
                            kind,
                            sample,
                        });
                        sample += 1;
                    }
                    Err(e) => issues.push(LoadIssue {
                        path: file,
                        message: e.to_string(),
                    }),
                }
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no signature images found under {}", dir.display())));
    }
    let manifest = dir.join(MANIFEST_NAME);
    let seed = if manifest.is_file() { read_manifest(&manifest)?.seed } else { 0 };
    Ok((
        Dataset {
            height: h,
            width: w,
            seed,
            images,
        },
        issues,
    ))
}
