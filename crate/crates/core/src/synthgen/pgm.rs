//! Binary portable graymap (P5, maxval 255).

use crate::synthgen::render::GrayImage;

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic `{}`", fields[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| format!("bad header field `{s}`: {e}"))
    };
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != need {
        return Err(format!("expected {need} pixel bytes, found {}", body.len()));
    }
    GrayImage::new(height, width, body.to_vec()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let img = GrayImage::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = encode(&img);
        assert_eq!(decode(&bytes).unwrap(), img);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode(b"P5\n# made by hand\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(img.pixels, vec![1, 2]);
    }
}
