use std::fs::File;
use std::io::{BufRead, BufReader, Cursor, Read, Seek, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn to_byte<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64().clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

fn interleaved_bytes<T: Scalar>(img: &Image<T>) -> Vec<u8> {
    let (w, h, c) = img.dims();
    let mut out = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(img.get(ch, y, x)));
            }
        }
    }
    out
}

fn from_interleaved<T: Scalar>(w: usize, h: usize, stride: usize, keep: usize, bytes: &[u8]) -> Image<T> {
    let scale = T::lit(255.0).recip();
    Image::from_fn(w, h, keep, |ch, y, x| T::from(bytes[(y * w + x) * stride + ch]).unwrap() * scale)
}

fn read_png<T: Scalar, R: BufRead + Seek>(reader: R) -> Result<Image<T>> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Io(format!("png: {e}")))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Io("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Io(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(Error::Io("png: empty image".into()));
    }
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::Io(format!("png: unsupported color type {other:?}"))),
    };
    if info.line_size != w * stride {
        return Err(Error::Io("png: unexpected row layout".into()));
    }
    Ok(from_interleaved(w, h, stride, keep, &buf[..w * h * stride]))
}

/// Decodes an 8-bit grayscale or RGB PNG (alpha is dropped).
pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    read_png(Cursor::new(bytes))
}

pub fn load_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let file = File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_png(BufReader::new(file))
}

fn write_png<T: Scalar, W: Write>(img: &Image<T>, sink: W) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidDims(format!("png needs 1 or 3 channels, got {c}"))),
    };
    let mut enc = png::Encoder::new(sink, img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Io(format!("png: {e}")))?;
    writer
        .write_image_data(&interleaved_bytes(img))
        .map_err(|e| Error::Io(format!("png: {e}")))?;
    writer.finish().map_err(|e| Error::Io(format!("png: {e}")))
}

/// Encodes an image as 8-bit PNG after clipping to `[0, 1]`.
pub fn encode_png<T: Scalar>(img: &Image<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_png(img, &mut out)?;
    Ok(out)
}

pub fn save_png<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    write_png(img, std::io::BufWriter::new(file))
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Io("pgm: malformed header".into()))
}

/// Reads a binary (P5) 8-bit PGM.
pub fn load_pgm<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Io("pgm: missing P5 magic".into()));
    }
    let mut pos = 2;
    let w = pgm_token(&bytes, &mut pos)?;
    let h = pgm_token(&bytes, &mut pos)?;
    let maxval = pgm_token(&bytes, &mut pos)?;
    if w == 0 || h == 0 || maxval != 255 {
        return Err(Error::Io(format!("pgm: unsupported header {w}x{h} max {maxval}")));
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(Error::Io("pgm: truncated pixel data".into()));
    }
    Ok(from_interleaved(w, h, 1, 1, &bytes[pos..pos + w * h]))
}

pub fn save_pgm<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::InvalidDims("pgm holds a single channel".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(interleaved_bytes(img));
    std::fs::write(path.as_ref(), out)
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
}

/// Dispatches on the file extension (`.pgm` or PNG otherwise).
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    match path.as_ref().extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => load_pgm(path),
        _ => load_png(path),
    }
}

pub fn save_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    match path.as_ref().extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => save_pgm(img, path),
        _ => save_png(img, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::<f64>::from_fn(7, 5, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back: Image<f64> = load_png(&p).unwrap();
        assert_eq!(back.dims(), (7, 5, 3));
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn zero_image_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::<f64>::zeros(4, 3, 1);
        let p = dir.path().join("z.pgm");
        save_pgm(&img, &p).unwrap();
        assert_eq!(load_pgm::<f64>(&p).unwrap(), img);
        let q = dir.path().join("z.png");
        save_png(&img, &q).unwrap();
        assert_eq!(load_png::<f64>(&q).unwrap(), img);
    }

    #[test]
    fn saving_clips_out_of_range() {
        let img = Image::<f64>::from_vec(2, 1, 1, vec![-0.5, 1.7]).unwrap();
        let back: Image<f64> = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_png::<f64>(&p), Err(Error::Io(_))));
        let q = dir.path().join("bad.pgm");
        std::fs::write(&q, b"P5\n4 4\n255\n12").unwrap();
        assert!(matches!(load_pgm::<f64>(&q), Err(Error::Io(_))));
        assert!(matches!(load_png::<f64>(dir.path().join("missing.png")), Err(Error::Io(_))));
    }
}
