//! Little-endian frame container (`FDF1`).
//!
//! Layout: magic `FDF1`; u32 N, H, W, C; 9×f64 K; 9×f64 R; 3×f64 t;
//! N×3 f64 coordinates; N×u16 labels; N×u8 weak mask; u8 frame-labeled flag;
//! H·W·3 f64 raw channels; H·W u16 dense class map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Frame, Image};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Extrinsics, Intrinsics, Mat3, PointCloud};

pub const FRAME_MAGIC: &[u8; 4] = b"FDF1";

pub fn write_frame<W: Write>(mut w: W, frame: &Frame) -> Result<()> {
    frame.check_invariants()?;
    let n = frame.len();
    w.write_all(FRAME_MAGIC)?;
    for v in [n as u32, frame.image.height, frame.image.width, frame.num_classes] {
        w.write_all(&v.to_le_bytes())?;
    }
    let intr = &frame.cam.intrinsics;
    let extr = &frame.cam.extrinsics;
    for v in intr
        .k
        .iter()
        .flatten()
        .chain(extr.r.iter().flatten())
        .chain(extr.t.iter())
    {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in &frame.cloud.points {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for l in &frame.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    let mask: Vec<u8> = frame.weak_mask.iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    w.write_all(&[frame.frame_labeled as u8])?;
    for v in &frame.image.raw {
        w.write_all(&v.to_le_bytes())?;
    }
    for c in &frame.image.classes {
        w.write_all(&c.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format("frame", format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn mat3(&mut self, what: &'static str) -> Result<Mat3> {
        let mut m = [[0.0; 3]; 3];
        for v in m.iter_mut().flatten() {
            *v = self.f64(what)?;
        }
        Ok(m)
    }
}

pub fn read_frame<R: Read>(r: R) -> Result<Frame> {
    let mut r = Reader { inner: r };
    let magic: [u8; 4] = r.bytes("magic")?;
    if &magic != FRAME_MAGIC {
        return Err(Error::format("frame", format!("bad magic {magic:?}")));
    }
    let n = r.u32("point count")? as usize;
    let h = r.u32("image height")?;
    let w = r.u32("image width")?;
    let c = r.u32("class count")?;
    let k = r.mat3("K")?;
    let rot = r.mat3("R")?;
    let t = [r.f64("t")?, r.f64("t")?, r.f64("t")?];
    let cam = CameraModel::new(Intrinsics::new(k, w, h)?, Extrinsics::new(rot, t)?);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f64("points")?, r.f64("points")?, r.f64("points")?]);
    }
    let labels = (0..n).map(|_| r.u16("labels")).collect::<Result<Vec<_>>>()?;
    let mut weak_mask = Vec::with_capacity(n);
    for _ in 0..n {
        match r.bytes::<1>("weak mask")?[0] {
            0 => weak_mask.push(false),
            1 => weak_mask.push(true),
            v => return Err(Error::format("frame", format!("weak mask byte {v}"))),
        }
    }
    let frame_labeled = match r.bytes::<1>("frame flag")?[0] {
        0 => false,
        1 => true,
        v => return Err(Error::format("frame", format!("frame flag byte {v}"))),
    };
    let pixels = h as usize * w as usize;
    let raw = (0..pixels * 3)
        .map(|_| r.f64("raw image"))
        .collect::<Result<Vec<_>>>()?;
    let classes = (0..pixels).map(|_| r.u16("class map")).collect::<Result<Vec<_>>>()?;
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::format("frame", "trailing bytes"));
    }
    let frame = Frame {
        cloud: PointCloud::new(points),
        cam,
        image: Image {
            height: h,
            width: w,
            raw,
            classes,
        },
        num_classes: c,
        labels,
        weak_mask,
        frame_labeled,
    };
    frame.check_invariants()?;
    Ok(frame)
}

pub fn write_frame_file(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    write_frame(BufWriter::new(File::create(path)?), frame)
}

pub fn read_frame_file(path: impl AsRef<Path>) -> Result<Frame> {
    read_frame(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_scene, scribble_sim, SceneConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let f = gen_scene(2, &SceneConfig::default()).unwrap();
        let (f, _) = scribble_sim(&f, 0.08, 1).unwrap();
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        let g = read_frame(buf.as_slice()).unwrap();
        assert_eq!(f, g);
        let mut buf2 = Vec::new();
        write_frame(&mut buf2, &g).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_corruption() {
        let f = gen_scene(2, &SceneConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_frame(bad.as_slice()).is_err());
        assert!(read_frame(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(read_frame(longer.as_slice()).is_err());
    }
}
