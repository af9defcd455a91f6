//! Binary graymap (P5) images, `id,score` CSV files and bilinear resizing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::Sample;
use crate::error::{dim_err, Error, Result};
use crate::scores::Modality;
use crate::tensor::Tensor;

/// Reads an 8-bit graymap as a `1×H×W` tensor scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected an 8-bit graymap, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[1, h as usize, w as usize], data)
}

/// Writes a single-channel tensor as a binary graymap, rounding to 8 bits.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(dim_err!("graymap needs a single-channel image, got {s:?}")),
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Bilinear resize of every channel of a `C×H×W` tensor with the
/// align-corners = false convention: output pixel `i` samples source
/// coordinate `(i + ½)·in/out − ½`, clamped to `[0, in − 1]`.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("resize needs C×H×W, got {s:?}")),
    };
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("cannot resize to {out_h}×{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

#[derive(serde::Deserialize, serde::Serialize)]
struct ScoreRow {
    id: String,
    score: f64,
}

/// Loads `score_file` (CSV with header `id,score`) and the matching
/// `<id>.pgm` images from `image_dir`, resized to `height×width`. Samples are
/// returned sorted by id.
pub fn load_dataset(
    image_dir: &Path,
    score_file: &Path,
    modality: Modality,
    height: usize,
    width: usize,
) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(score_file)
        .map_err(|e| csv_error(score_file, e))?;
    let mut rows: BTreeMap<String, f64> = BTreeMap::new();
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let row = row.map_err(|e| Error::Dataset(format!("{} row {line}: {e}", score_file.display())))?;
        if !modality.in_range(row.score) {
            return Err(Error::Dataset(format!(
                "{} row {line}: score {} for `{}` is outside the {modality} range [0, {}]",
                score_file.display(),
                row.score,
                row.id,
                modality.range_max()
            )));
        }
        if rows.insert(row.id.clone(), row.score).is_some() {
            return Err(Error::Dataset(format!(
                "{} row {line}: duplicate id `{}`",
                score_file.display(),
                row.id
            )));
        }
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{} has no rows", score_file.display())));
    }

    let mut paths: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for entry in std::fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))? {
        let path = entry.map_err(|e| Error::io(image_dir, e))?.path();
        let is_graymap = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("pnm"));
        if let (true, Some(stem)) = (is_graymap, path.file_stem().and_then(|s| s.to_str())) {
            paths.entry(stem.to_string()).or_default().push(path);
        }
    }
    let missing: Vec<&str> = rows.keys().filter(|id| !paths.contains_key(*id)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("no image found for ids: {}", missing.join(", "))));
    }

    rows.into_iter()
        .map(|(id, score)| {
            let found = &paths[&id];
            if found.len() > 1 {
                return Err(Error::Dataset(format!("id `{id}` matches several images: {found:?}")));
            }
            let image = resize_bilinear(&read_pgm(&found[0])?, height, width)?;
            Ok(Sample { id, image, score })
        })
        .collect()
}

/// Writes `<id>.pgm` for every sample and `scores.csv` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_pgm(&dir.join(format!("{}.pgm", s.id)), &s.image)?;
    }
    let path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for s in samples {
        w.serialize(ScoreRow {
            id: s.id.clone(),
            score: s.score,
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Dataset(format!("{}: {e}", path.display()))
    }
}
