//! Binary PPM (P6) raster I/O. Images are [3, H, W] f64 tensors in [0,1];
//! files store interleaved 8-bit RGB.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::Shape(format!("ppm wants [3,H,W], got {:?}", image.shape)));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut buf = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            let v = (image.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.push(v);
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let mut header = Vec::new();
    // magic, width, height, maxval: whitespace-separated, # comments allowed
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        f.read_exact(&mut byte)
            .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
        match byte[0] {
            b'#' => {
                let mut skip = Vec::new();
                f.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !header.is_empty() {
                    fields.push(String::from_utf8_lossy(&header).into_owned());
                    header.clear();
                }
            }
            c => header.push(c),
        }
    }
    if fields[0] != "P6" {
        return Err(Error::Data(format!("{}: not a P6 ppm", path.display())));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Data("bad ppm width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Data("bad ppm height".into()))?;
    let maxval: usize = fields[3].parse().map_err(|_| Error::Data("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported ppm maxval {maxval}")));
    }
    let plane = h * w;
    let mut raw = vec![0u8; plane * 3];
    f.read_exact(&mut raw)
        .map_err(|_| Error::Data(format!("{}: truncated pixel data", path.display())))?;
    let mut data = vec![0.0; plane * 3];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raw[i * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}
