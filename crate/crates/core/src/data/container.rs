use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

use super::{LabelMap, SampleMeta, SegSample};

/// Writes samples as a `PASERDS v1` file.
pub fn write_dataset(path: &Path, samples: &[SegSample], num_classes: usize) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "PASERDS v1 {} {c} {h} {w} {num_classes}", samples.len()).map_err(io)?;
    for s in samples {
        if s.image.shape() != [c, h, w] {
            return Err(Error::shape("dataset", format!("{:?} in a {c}x{h}x{w} file", s.image.shape())));
        }
        if s.labels.labels.iter().any(|&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!("label out of range for K = {num_classes}")));
        }
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        out.write_all(&s.labels.labels).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a `PASERDS v1` file, stamping every sample with `meta`.
pub fn read_dataset(path: &Path, meta: &SampleMeta) -> Result<(Vec<SegSample>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = BufReader::new(file);
    let mut header = String::new();
    rd.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != "PASERDS" || fields[1] != "v1" {
        return Err(Error::Parse(format!("bad dataset header `{}`", header.trim_end())));
    }
    let nums = fields[2..]
        .iter()
        .map(|f| f.parse::<usize>().map_err(|_| Error::Parse(format!("bad header field `{f}`"))))
        .collect::<Result<Vec<_>>>()?;
    let (n, c, h, w, k) = (nums[0], nums[1], nums[2], nums[3], nums[4]);
    let mut samples = Vec::with_capacity(n);
    let mut fbuf = vec![0u8; 4 * c * h * w];
    for i in 0..n {
        let mut labels = vec![0u8; h * w];
        rd.read_exact(&mut fbuf)
            .and_then(|_| rd.read_exact(&mut labels))
            .map_err(|_| Error::Truncated(format!("dataset ends inside sample {i} of {n}")))?;
        if labels.iter().any(|&l| l as usize >= k) {
            return Err(Error::Parse(format!("sample {i} has a label outside 0..{k}")));
        }
        let image = fbuf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        samples.push(SegSample::new(Tensor::new(vec![c, h, w], image)?, LabelMap::new(h, w, labels)?, meta.clone())?);
    }
    Ok((samples, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_phase_texture;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.paserds");
        let samples = gen_phase_texture(3, 1, [0.2, 0.2, 0.6]).unwrap();
        write_dataset(&path, &samples, 3).unwrap();
        let (back, k) = read_dataset(&path, &samples[0].meta).unwrap();
        assert_eq!(k, 3);
        assert_eq!(back, samples);
        let head = std::fs::read(&path).unwrap();
        assert!(head.starts_with(b"PASERDS v1 3 1 64 64 3\n"));
        assert_eq!(head.len(), 23 + 3 * (4 * 64 * 64 + 64 * 64));
    }

    #[test]
    fn truncated_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.paserds");
        let samples = gen_phase_texture(2, 1, [0.2, 0.2, 0.6]).unwrap();
        write_dataset(&path, &samples, 3).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_dataset(&path, &samples[0].meta), Err(Error::Truncated(_))));
        std::fs::write(&path, b"PASERDS v2 1 1 1 1 2\n").unwrap();
        assert!(matches!(read_dataset(&path, &samples[0].meta), Err(Error::Parse(_))));
    }
}
