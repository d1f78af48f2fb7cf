//! Image loading, PNG visualization, and the `VTBT` tensor container.
//!
//! A `VTBT` file is laid out as follows, all integers little-endian:
//!
//! ```text
//! "VTBT"            4 bytes magic
//! version   u32     currently 1
//! count     u32     number of blobs that follow
//! count × {
//!     name_len  u32
//!     name      name_len bytes, UTF-8
//!     dtype     u32     1 = f64
//!     ndim      u32
//!     dims      u64 × ndim
//!     payload   f64 × product(dims), little-endian
//! }
//! ```
//!
//! A single tensor is a container with one blob. Encrypted images and models
//! are always stored this way, never as 8-bit pictures, because quantizing
//! would break the exact inverse of the block transform.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTBT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;

/// Whether an image holds plain pixels in `[0, 1]` or encrypted real values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeTag {
    Plain,
    Encrypted,
}

impl RangeTag {
    fn blob_name(self) -> &'static str {
        match self {
            RangeTag::Plain => "plain_image",
            RangeTag::Encrypted => "encrypted_image",
        }
    }
}

/// An `h × w × c` image stored row-major with the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: RangeTag,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        range: RangeTag,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(format!(
                "zero-area image {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if range == RangeTag::Plain && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("plain image has values outside [0, 1]"));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
            range,
        })
    }

    /// Same as [`ImageTensor::new`] with the `Plain` tag.
    pub fn plain(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, channels, data, RangeTag::Plain)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    pub fn to_blob(&self) -> TensorBlob {
        TensorBlob {
            name: self.range.blob_name().to_string(),
            dims: vec![self.height, self.width, self.channels],
            data: self.data.clone(),
        }
    }

    pub fn from_blob(blob: &TensorBlob) -> Result<Self> {
        let range = match blob.name.as_str() {
            "plain_image" => RangeTag::Plain,
            "encrypted_image" => RangeTag::Encrypted,
            other => return Err(Error::Format(format!("blob {other:?} is not an image"))),
        };
        if blob.dims.len() != 3 {
            return Err(Error::dim(format!(
                "image blob must have 3 dims, got {:?}",
                blob.dims
            )));
        }
        Self::new(
            blob.dims[0],
            blob.dims[1],
            blob.dims[2],
            blob.data.clone(),
            range,
        )
    }
}

/// A named, dense f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlob {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let blob = TensorBlob {
            name: name.into(),
            dims,
            data,
        };
        blob.validate()?;
        Ok(blob)
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::dim(format!(
                "blob {:?} has invalid dims {:?}",
                self.name, self.dims
            )));
        }
        let len: usize = self.dims.iter().product();
        if len != self.data.len() {
            return Err(Error::dim(format!(
                "blob {:?} dims {:?} need {len} values, got {}",
                self.name,
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn encode_blobs(blobs: &[TensorBlob]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for blob in blobs {
        blob.validate()?;
        out.extend_from_slice(&(blob.name.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.name.as_bytes());
        out.extend_from_slice(&DTYPE_F64.to_le_bytes());
        out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
        for &d in &blob.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &blob.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_blobs(bytes: &[u8]) -> Result<Vec<TensorBlob>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("blob name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u32()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(64));
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let payload = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Format("dims overflow".into()))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push(TensorBlob::new(name, dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last blob".into()));
    }
    Ok(blobs)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::param(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_blobs(blobs: &[TensorBlob], path: &Path) -> Result<()> {
    write_atomic(path, &encode_blobs(blobs)?)
}

pub fn load_blobs(path: &Path) -> Result<Vec<TensorBlob>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blobs(&bytes)
}

pub fn save_tensor(blob: &TensorBlob, path: &Path) -> Result<()> {
    save_blobs(std::slice::from_ref(blob), path)
}

pub fn load_tensor(path: &Path) -> Result<TensorBlob> {
    let mut blobs = load_blobs(path)?;
    if blobs.len() != 1 {
        return Err(Error::Format(format!(
            "expected a single tensor, found {} blobs",
            blobs.len()
        )));
    }
    Ok(blobs.pop().unwrap())
}

/// Loads an 8-bit PNG or binary PPM (P6) into a plain tensor in `[0, 1]`.
///
/// Gray images yield one channel, RGB three; an alpha channel is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|message| Error::Image {
        path: path.to_path_buf(),
        message,
    })
}

fn decode_image(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    let format = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P6") {
        ImageFormat::Pnm
    } else {
        return Err("unsupported format (expected PNG or binary PPM)".into());
    };
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err("zero-area image".into());
    }
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => return Err(format!("unsupported pixel type {:?}", other.color())),
    };
    let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    ImageTensor::plain(h, w, channels, data).map_err(|e| e.to_string())
}

/// Quantizes an image to 8 bits for display.
///
/// Plain images map `[0, 1]` onto `[0, 255]`, so loading a PNG and exporting
/// it reproduces the original bytes. Encrypted images are stretched from
/// their own `[min, max]`; a constant encrypted image becomes all 128.
pub fn visualize(img: &ImageTensor) -> Vec<u8> {
    let (lo, hi) = match img.range() {
        RangeTag::Plain => (0.0, 1.0),
        RangeTag::Encrypted => img
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
    };
    if hi <= lo {
        return vec![128; img.data().len()];
    }
    img.data()
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes [`visualize`] output as a gray or RGB PNG. Lossy.
pub fn export_visualization(img: &ImageTensor, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let pixels = visualize(img);
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, pixels).unwrap()),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, pixels).unwrap()),
        c => {
            return Err(Error::param(format!(
                "cannot visualize an image with {c} channels"
            )))
        }
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    write_atomic(path, bytes.get_ref())
}

/// Loads either a `VTBT` image blob or a PNG/PPM picture.
pub fn load_any_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        let blobs = decode_blobs(&bytes)?;
        match blobs.as_slice() {
            [blob] => ImageTensor::from_blob(blob),
            _ => Err(Error::Format(format!(
                "{} holds {} blobs, expected one image",
                path.display(),
                blobs.len()
            ))),
        }
    } else {
        decode_image(&bytes).map_err(|message| Error::Image {
            path: path.to_path_buf(),
            message,
        })
    }
}

pub fn save_image_tensor(img: &ImageTensor, path: &Path) -> Result<()> {
    save_tensor(&img.to_blob(), path)
}
