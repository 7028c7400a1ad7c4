//! Multi-page 32-bit float TIFF reading and writing. This is the on-disk
//! format for generated datasets (pages: d1, d2) and stitched predictions
//! (pages: mu1, mu2).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use crate::error::{DemixError, Result};

pub fn write_f32_multipage(path: &Path, pages: &[Array2<f32>]) -> Result<()> {
    if pages.is_empty() {
        return Err(DemixError::Data("no pages to write".into()));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = TiffEncoder::new(file)?;
    for page in pages {
        let (h, w) = page.dim();
        let data = page
            .as_slice()
            .ok_or_else(|| DemixError::Shape("non-contiguous page".into()))?;
        enc.write_image::<colortype::Gray32Float>(w as u32, h as u32, data)?;
    }
    Ok(())
}

pub fn read_f32_multipage(path: &Path) -> Result<Vec<Array2<f32>>> {
    let file = BufReader::new(File::open(path)?);
    let mut dec = Decoder::new(file)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions()?;
        let img = dec.read_image()?;
        let data = match img {
            DecodingResult::F32(v) => v,
            other => {
                return Err(DemixError::Tiff(format!(
                    "expected 32-bit float samples, got {:?}",
                    kind_name(&other)
                )))
            }
        };
        let arr = Array2::from_shape_vec((h as usize, w as usize), data)
            .map_err(|e| DemixError::Tiff(e.to_string()))?;
        pages.push(arr);
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    Ok(pages)
}

fn kind_name(r: &DecodingResult) -> &'static str {
    match r {
        DecodingResult::U8(_) => "u8",
        DecodingResult::U16(_) => "u16",
        DecodingResult::U32(_) => "u32",
        DecodingResult::U64(_) => "u64",
        DecodingResult::I8(_) => "i8",
        DecodingResult::I16(_) => "i16",
        DecodingResult::I32(_) => "i32",
        DecodingResult::I64(_) => "i64",
        DecodingResult::F32(_) => "f32",
        DecodingResult::F64(_) => "f64",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn roundtrip_two_pages() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tif");
        let a = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) as f32 * 0.5);
        let b = Array2::from_elem((5, 7), -1.25f32);
        write_f32_multipage(&p, &[a.clone(), b.clone()]).unwrap();
        let pages = read_f32_multipage(&p).unwrap();
        assert_eq!(pages.len(), 2);
        assert_eq!(pages[0], a);
        assert_eq!(pages[1], b);
    }

    #[test]
    fn missing_file_errors() {
        assert!(read_f32_multipage(Path::new("/nonexistent/x.tif")).is_err());
    }
}
