//! Binary container for named f64 arrays, used by checkpoint files.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UBLB";
const VERSION: u16 = 1;

pub fn write_blob<W: Write>(mut w: W, arrays: &BTreeMap<String, ArrayD<f64>>) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(arrays.len() as u32)?;
    for (name, arr) in arrays {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(arr.ndim() as u8)?;
        for &d in arr.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in arr.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_blob<R: Read>(mut r: R) -> io::Result<BTreeMap<String, ArrayD<f64>>> {
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an array blob file"));
    }
    if r.read_u16::<LittleEndian>()? != VERSION {
        return Err(bad("unsupported blob version"));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("name is not utf-8"))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(shape, data).map_err(|_| bad("shape mismatch"))?;
        if map.insert(name, arr).is_some() {
            return Err(bad("duplicate array name"));
        }
    }
    Ok(map)
}

pub fn save_blob(path: &Path, arrays: &BTreeMap<String, ArrayD<f64>>) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_blob(io::BufWriter::new(file), arrays)
}

pub fn load_blob(path: &Path) -> io::Result<BTreeMap<String, ArrayD<f64>>> {
    let file = std::fs::File::open(path)?;
    read_blob(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut map = BTreeMap::new();
        map.insert("a.w".to_string(), arr2(&[[1.5f64, -2.25], [0.1, 3.0]]).into_dyn());
        map.insert("b".to_string(), ArrayD::from_shape_vec(vec![3], vec![f64::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        let mut buf = Vec::new();
        write_blob(&mut buf, &map).unwrap();
        let back = read_blob(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for (k, v) in &map {
            let b = &back[k];
            assert_eq!(b.shape(), v.shape());
            for (x, y) in v.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_foreign_data() {
        assert!(read_blob(&b"NOPE"[..]).is_err());
    }
}
