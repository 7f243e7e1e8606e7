//! Directories of 8-bit RGB PNG frames.

use std::path::{Path, PathBuf};

use dap_core::cell::FrameSource;
use dap_core::metrics::quantize;
use dap_core::Tensor;

use crate::Failure;

/// PNG files of `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Failure::Io(format!("no PNG frames in {}", dir.display())));
    }
    Ok(paths)
}

/// Decodes a PNG into a `(3, H, W)` tensor in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor, Failure> {
    let img = image::open(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Clamps, rounds half away from zero to 8 bits and writes a PNG.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<(), Failure> {
    let (c, h, w) = frame.chw()?;
    if c != 3 {
        return Err(Failure::Shape(format!("expected an RGB frame, got {c} channels")));
    }
    let plane = h * w;
    let d = frame.data();
    let mut raw = vec![0u8; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            raw[3 * i + ch] = quantize(d[ch * plane + i]);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Io(format!("{}: {e}", parent.display())))?;
    }
    image::save_buffer(path, &raw, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// Every frame of `dir`, checked to share one size.
pub fn read_sequence(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Tensor>), Failure> {
    let paths = list_frames(dir)?;
    let frames = paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>, _>>()?;
    if let Some(i) = frames.iter().position(|f| f.dims() != frames[0].dims()) {
        return Err(Failure::Shape(format!(
            "{} has dims {:?}, first frame {:?}",
            paths[i].display(),
            frames[i].dims(),
            frames[0].dims()
        )));
    }
    Ok((paths, frames))
}

/// Decodes one file per request, so nothing is read ahead of the consumer.
pub struct LazyFrames {
    paths: std::vec::IntoIter<PathBuf>,
    dims: Option<Vec<usize>>,
}

impl LazyFrames {
    pub fn new(paths: Vec<PathBuf>) -> Self {
        Self {
            paths: paths.into_iter(),
            dims: None,
        }
    }
}

impl FrameSource for LazyFrames {
    fn next_frame(&mut self) -> Option<dap_core::Result<Tensor>> {
        let path = self.paths.next()?;
        let frame = read_frame(&path).map_err(|f| match f {
            Failure::Shape(m) => dap_core::Error::Shape(m),
            other => dap_core::Error::Format(other.to_string()),
        });
        Some(frame.and_then(|f| {
            match &self.dims {
                Some(d) if d.as_slice() != f.dims() => {
                    return Err(dap_core::Error::Shape(format!(
                        "{} has dims {:?}, first frame {:?}",
                        path.display(),
                        f.dims(),
                        d
                    )))
                }
                None => self.dims = Some(f.dims().to_vec()),
                _ => {}
            }
            Ok(f)
        }))
    }
}
