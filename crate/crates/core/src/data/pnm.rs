//! Binary portable pixmaps (P6, 8-bit RGB).

use crate::error::{Error, Result};

/// Interleaved RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb8 {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            // Skip whitespace and `#` comments.
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while let Some(&c) = bytes.get(pos) {
                            pos += 1;
                            if c == b'\n' {
                                break;
                            }
                        }
                    }
                    Some(c) if c.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(Error::Parse("truncated pixmap header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(Error::Parse("not a binary pixmap (P6)".into()));
        }
        let mut num = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse()
                .map_err(|_| Error::Parse(format!("bad pixmap {what} {t:?}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::Parse(format!("unsupported pixmap maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let need = width * height * 3;
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| Error::Parse(format!("pixmap raster shorter than {need} bytes")))?;
        Ok(Rgb8 {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}
