use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};
use rayon::prelude::*;

use super::{Dataset, Provenance, Split};
use crate::augment::Image;
use crate::autodiff::{Checkpoint, Tensor};
use crate::error::{Error, Result};

const PNM_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];
const TENSOR_EXTENSION: &str = "ptt1";

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

fn from_dynamic(img: DynamicImage, path: &Path) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect::<Vec<_>>()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        other if other.color().has_color() => (3, other.to_rgb32f().into_raw()),
        other => (1, other.to_luma32f().into_raw()),
    };
    // interleaved HWC to planar CHW
    let mut planar = vec![0.0; data.len()];
    for (i, v) in data.into_iter().enumerate() {
        planar[(i % channels) * h * w + i / channels] = v;
    }
    Image::new(channels, h, w, planar).map_err(|e| Error::load(path, e.to_string()))
}

fn decode_ptt1(path: &Path) -> Result<Image> {
    let ck = Checkpoint::load(path).map_err(|e| Error::load(path, e.to_string()))?;
    let tensor = match ck.entries() {
        [(_, t)] => t,
        entries => return Err(Error::load(path, format!("expected one tensor, found {}", entries.len()))),
    };
    let (c, h, w) = match *tensor.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::load(path, format!("expected [C, H, W] or [H, W], got {s:?}"))),
    };
    if c != 1 && c != 3 {
        return Err(Error::load(path, format!("{c} channels; expected 1 or 3")));
    }
    if !tensor.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::load(path, "pixel values outside [0, 1]"));
    }
    Image::new(c, h, w, tensor.data().to_vec()).map_err(|e| Error::load(path, e.to_string()))
}

/// Decode a PTT1 tensor file or any raster format the `image` backend was
/// built with (PGM/PPM always). Values are scaled to `[0, 1]`.
pub fn decode_image(path: &Path) -> Result<Image> {
    if extension(path).as_deref() == Some(TENSOR_EXTENSION) {
        return decode_ptt1(path);
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::load(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| Error::load(path, e.to_string()))?
        .decode()
        .map_err(|e| Error::load(path, e.to_string()))?;
    from_dynamic(img, path)
}

/// Binary 8-bit PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let n = img.pixels();
    let mut bytes = Vec::with_capacity(n * img.channels);
    for i in 0..n {
        for c in 0..img.channels {
            bytes.push((img.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let (subtype, color) = match img.channels {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        c => return Err(Error::Geometry(format!("cannot encode {c}-channel image as PNM"))),
    };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&bytes, img.width as u32, img.height as u32, color)
        .map_err(|e| Error::Geometry(e.to_string()))?;
    Ok(out)
}

/// Store one image as a single `[C, H, W]` tensor named `image`.
pub fn write_sample_ptt1(path: &Path, img: &Image) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert(
        "image",
        Tensor::new(vec![img.channels, img.height, img.width], img.data.clone())?,
    );
    ck.save(path)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::load(dir, e.to_string()))?;
    entries.sort();
    Ok(entries)
}

fn is_hidden(path: &Path) -> bool {
    path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
}

fn class_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in sorted_entries(dir)? {
        if is_hidden(&path) || path.is_dir() {
            continue;
        }
        match extension(&path) {
            Some(e) if PNM_EXTENSIONS.contains(&e.as_str()) || e == TENSOR_EXTENSION => files.push(path),
            _ => {
                return Err(Error::load(
                    &path,
                    "unsupported file type; expected .pgm, .ppm or .ptt1 (convert other formats first)",
                ))
            }
        }
    }
    if files.is_empty() {
        return Err(Error::load(dir, "class directory contains no images"));
    }
    Ok(files)
}

fn load_classes(root: &Path, classes: Vec<(String, PathBuf)>, image_size: usize, channels: usize) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::load(root, "no class directories"));
    }
    let mut files = Vec::new();
    let mut labels = Vec::new();
    for (label, (_, dir)) in classes.iter().enumerate() {
        for f in class_files(dir)? {
            files.push(f);
            labels.push(label);
        }
    }
    let decoded: Vec<Image> = files
        .par_iter()
        .map(|p| decode_image(p))
        .collect::<Result<_>>()?;
    let first = &decoded[0];
    for (img, path) in decoded.iter().zip(&files) {
        if img.channels != channels {
            return Err(Error::load(path, format!("{} channel(s), expected {channels}", img.channels)));
        }
        if (img.height, img.width) != (first.height, first.width) {
            return Err(Error::load(
                path,
                format!(
                    "mixed geometries: {}x{} here, {}x{} in {}",
                    img.height,
                    img.width,
                    first.height,
                    first.width,
                    files[0].display()
                ),
            ));
        }
    }
    let images = decoded
        .into_par_iter()
        .map(|img| img.resize(image_size, image_size))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        images,
        Some(labels),
        classes.into_iter().map(|(n, _)| n).collect(),
        Split::Train,
        Provenance::Directory(root.to_path_buf()),
    )
}

/// Load `root/<class>/<sample>.{pgm,ppm,ptt1}`. Classes are labeled in
/// lexicographic order of directory name and samples are resized to
/// `image_size` square.
pub fn load_directory_dataset(root: &Path, image_size: usize, channels: usize) -> Result<Dataset> {
    let classes = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir() && !is_hidden(p))
        .map(|p| (p.file_name().expect("entry has a name").to_string_lossy().into_owned(), p))
        .collect();
    load_classes(root, classes, image_size, channels)
}

/// Class names, one per line; blank lines and `#` comments are skipped.
pub fn read_split_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut names: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if names.iter().any(|n| n == line) {
            return Err(Error::load(path, format!("class {line:?} listed twice")));
        }
        names.push(line.to_string());
    }
    if names.is_empty() {
        return Err(Error::load(path, "split file lists no classes"));
    }
    Ok(names)
}

/// Load only the classes named in `split_file`, labeled in lexicographic order.
pub fn load_split(root: &Path, split_file: &Path, split: Split, image_size: usize, channels: usize) -> Result<Dataset> {
    let mut names = read_split_file(split_file)?;
    names.sort();
    let mut classes = Vec::with_capacity(names.len());
    for name in names {
        let dir = root.join(&name);
        if !dir.is_dir() {
            return Err(Error::load(&dir, format!("class {name:?} from {} not found", split_file.display())));
        }
        classes.push((name, dir));
    }
    let mut ds = load_classes(root, classes, image_size, channels)?;
    ds.split = split;
    Ok(ds)
}

/// On-disk sample format written by [`convert_directory`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    /// Binary PGM for one channel, PPM for three.
    Pnm,
    Ptt1,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConvertSummary {
    pub classes: usize,
    pub images: usize,
}

/// Rewrite `src/<class>/<image>` (any decodable raster format) as
/// `dst/<class>/<stem>.{pgm,ppm,ptt1}`, optionally forcing the channel
/// count and resizing to a square side.
pub fn convert_directory(
    src: &Path,
    dst: &Path,
    format: SampleFormat,
    size: Option<usize>,
    channels: Option<usize>,
) -> Result<ConvertSummary> {
    let classes: Vec<PathBuf> = sorted_entries(src)?
        .into_iter()
        .filter(|p| p.is_dir() && !is_hidden(p))
        .collect();
    let mut jobs = Vec::new();
    for dir in &classes {
        let name = dir.file_name().expect("entry has a name");
        for f in sorted_entries(dir)? {
            if f.is_file() && !is_hidden(&f) {
                jobs.push((f.clone(), dst.join(name)));
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::load(src, "no images found under class directories"));
    }
    for dir in &classes {
        let out = dst.join(dir.file_name().expect("entry has a name"));
        fs::create_dir_all(&out).map_err(|e| Error::load(&out, e.to_string()))?;
    }
    jobs.par_iter().try_for_each(|(path, out_dir)| -> Result<()> {
        let mut img = decode_image(path)?;
        img = match (channels, img.channels) {
            (Some(1), 3) => Image::new(1, img.height, img.width, luma(&img))?,
            (Some(3), 1) => Image::new(3, img.height, img.width, img.data.repeat(3))?,
            (Some(c), have) if c != have => return Err(Error::Config(format!("cannot convert to {c} channels"))),
            _ => img,
        };
        if let Some(s) = size {
            img = img.resize(s, s)?;
        }
        let stem = path.file_stem().expect("file has a name").to_string_lossy();
        match format {
            SampleFormat::Pnm => {
                let ext = if img.channels == 1 { "pgm" } else { "ppm" };
                let out = out_dir.join(format!("{stem}.{ext}"));
                fs::write(&out, encode_pnm(&img)?).map_err(|e| Error::load(&out, e.to_string()))
            }
            SampleFormat::Ptt1 => write_sample_ptt1(&out_dir.join(format!("{stem}.{TENSOR_EXTENSION}")), &img),
        }
    })?;
    Ok(ConvertSummary {
        classes: classes.len(),
        images: jobs.len(),
    })
}

fn luma(img: &Image) -> Vec<f32> {
    let n = img.pixels();
    (0..n)
        .map(|i| 0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_exact_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        for c in [1, 3] {
            let img = Image::new(c, 2, 2, data[..4 * c].to_vec()).unwrap();
            let path = dir.path().join(format!("x.{}", if c == 1 { "pgm" } else { "ppm" }));
            fs::write(&path, encode_pnm(&img).unwrap()).unwrap();
            assert_eq!(decode_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn full_white_decodes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pgm");
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend([255u8, 0]);
        fs::write(&path, bytes).unwrap();
        assert_eq!(decode_image(&path).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn ascii_ppm_is_planar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        fs::write(&path, "P3\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        let img = decode_image(&path).unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ptt1_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ptt1");
        let img = Image::new(3, 2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        write_sample_ptt1(&path, &img).unwrap();
        assert_eq!(decode_image(&path).unwrap(), img);
    }

    #[test]
    fn garbage_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, "not an image").unwrap();
        assert!(matches!(decode_image(&path), Err(Error::Load { .. })));
    }

    #[test]
    fn split_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.txt");
        fs::write(&path, "# base classes\nb\n\n a \n").unwrap();
        assert_eq!(read_split_file(&path).unwrap(), vec!["b", "a"]);
        fs::write(&path, "a\na\n").unwrap();
        assert!(read_split_file(&path).is_err());
    }

    #[test]
    fn convert_writes_loadable_layout() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        for class in ["b", "a"] {
            fs::create_dir(src.path().join(class)).unwrap();
            let img = Image::new(3, 4, 4, (0..48).map(|i| i as f32 / 47.0).collect()).unwrap();
            fs::write(src.path().join(class).join("x.ppm"), encode_pnm(&img).unwrap()).unwrap();
        }
        let s = convert_directory(src.path(), dst.path(), SampleFormat::Pnm, Some(8), Some(1)).unwrap();
        assert_eq!(s, ConvertSummary { classes: 2, images: 2 });
        let ds = load_directory_dataset(dst.path(), 8, 1).unwrap();
        assert_eq!(ds.class_names(), ["a", "b"]);
        assert_eq!(ds.image_size(), (8, 8));
    }

    #[test]
    fn convert_rejects_empty_tree() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        assert!(matches!(
            convert_directory(src.path(), dst.path(), SampleFormat::Ptt1, None, None),
            Err(Error::Load { .. })
        ));
    }
}
