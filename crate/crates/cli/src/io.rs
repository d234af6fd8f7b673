//! Text ingestion and the little-endian binary layouts for checkpoints
//! (`GDCN`) and dataset caches (`GDCD`).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use gdc_core::data::{Dataset, Split};
use gdc_core::model::{DropParam, LayerParams};
use gdc_core::variational::KumaraswamyParams;
use gdc_core::Tensor;

use crate::error::CliError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDCN";
pub const DATASET_MAGIC: &[u8; 4] = b"GDCD";
pub const FORMAT_VERSION: u32 = 1;

/// A parsed content/cites pair plus what was dropped along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Label strings in index order.
    pub label_names: Vec<String>,
    pub node_ids: Vec<String>,
    pub cites_lines: usize,
    pub skipped_unknown: usize,
    pub skipped_self_loops: usize,
}

fn open(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Reads `<id> TAB f_0 … f_{d-1} TAB <label>` rows and `<a> TAB <b>` citation
/// pairs. Node order follows the content file; label indices follow first
/// appearance. Citations naming unknown ids or a node citing itself are
/// skipped and counted.
pub fn load_content_cites(content: &Path, cites: &Path) -> Result<Loaded, CliError> {
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;

    for (i, line) in open(content)?.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CliError::io(content, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(content, lineno, "expected id, features and label"));
        }
        let d = fields.len() - 2;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(parse_err(content, lineno, format!("{d} features, earlier rows have {w}")));
            }
            _ => {}
        }
        let id = fields[0].to_string();
        if index.contains_key(&id) {
            return Err(parse_err(content, lineno, format!("duplicate node id {id}")));
        }
        for f in &fields[1..fields.len() - 1] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(content, lineno, format!("bad feature value {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(content, lineno, format!("non-finite feature value {f:?}")));
            }
            data.push(v);
        }
        let label = fields[fields.len() - 1].trim().to_string();
        let next = label_index.len();
        let l = *label_index.entry(label.clone()).or_insert_with(|| {
            label_names.push(label);
            next
        });
        labels.push(l);
        index.insert(id.clone(), ids.len());
        ids.push(id);
    }
    let n = ids.len();
    if n == 0 {
        return Err(parse_err(content, 0, "no nodes"));
    }
    let features = Tensor::from_vec(n, width.unwrap_or(0), data)?;

    let mut edges = Vec::new();
    let (mut cites_lines, mut skipped_unknown, mut skipped_self_loops) = (0, 0, 0);
    for (i, line) in open(cites)?.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CliError::io(cites, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(cites, lineno, "expected two node ids"));
        }
        cites_lines += 1;
        match (index.get(fields[0]), index.get(fields[1])) {
            (Some(&a), Some(&b)) if a == b => skipped_self_loops += 1,
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => skipped_unknown += 1,
        }
    }
    let dataset = Dataset::new(features, labels, edges)?;
    Ok(Loaded { dataset, label_names, node_ids: ids, cites_lines, skipped_unknown, skipped_self_loops })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> CliError {
        CliError::Format { path: self.path.to_path_buf(), msg: msg.into() }
    }
    fn take(&mut self, k: usize) -> Result<&'a [u8], CliError> {
        if self.buf.len() - self.pos < k {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize, CliError> {
        let v = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if v.saturating_mul(unit as u64) > remaining {
            return Err(self.err(format!("length {v} exceeds the file")));
        }
        Ok(v as usize)
    }
    fn f64s(&mut self, k: usize) -> Result<Vec<f64>, CliError> {
        (0..k).map(|_| self.f64()).collect()
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<(), CliError> {
        if self.take(4)? != magic {
            return Err(self.err(format!("not a {} file", String::from_utf8_lossy(magic))));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<(), CliError> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| CliError::io(path, e))?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(|e| CliError::io(path, e))
}

/// Layout: magic, version, layer count, then per layer `rows, cols`, the
/// row-major weight, a bias flag with `cols` values, and the drop parameter
/// (tag 0 with a keep probability, or tag 1 with `log a, log b`).
pub fn encode_checkpoint(params: &[LayerParams]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(params.len());
    for p in params {
        w.len(p.weight.rows());
        w.len(p.weight.cols());
        w.f64s(p.weight.data());
        match &p.bias {
            Some(b) => {
                w.u8(1);
                w.f64s(b.data());
            }
            None => w.u8(0),
        }
        match p.drop {
            DropParam::Fixed(keep) => {
                w.u8(0);
                w.f64(keep);
            }
            DropParam::Learned(k) => {
                w.u8(1);
                w.f64(k.log_a);
                w.f64(k.log_b);
            }
        }
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<LayerParams>, CliError> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC)?;
    let layers = r.len(1)?;
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = r.len(0)?;
        let cols = r.len(0)?;
        let weight = Tensor::from_vec(rows, cols, r.f64s(rows.checked_mul(cols).ok_or_else(|| r.err("bad dims"))?)?)?;
        let bias = match r.u8()? {
            0 => None,
            1 => Some(Tensor::from_vec(1, cols, r.f64s(cols)?)?),
            t => return Err(r.err(format!("bad bias flag {t}"))),
        };
        let drop = match r.u8()? {
            0 => DropParam::Fixed(r.f64()?),
            1 => DropParam::Learned(KumaraswamyParams { log_a: r.f64()?, log_b: r.f64()? }),
            t => return Err(r.err(format!("bad drop tag {t}"))),
        };
        out.push(LayerParams { weight, bias, drop });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &[LayerParams]) -> Result<(), CliError> {
    write_all(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<LayerParams>, CliError> {
    decode_checkpoint(&read_all(path)?, path)
}

/// Layout: magic, version, `n, f, classes, edges`, row-major features,
/// labels, edge pairs, then a split flag with three length-prefixed index
/// lists.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(ds.n_nodes());
    w.len(ds.n_features());
    w.len(ds.class_count);
    w.len(ds.edges.len());
    w.f64s(ds.features.data());
    for &l in &ds.labels {
        w.len(l);
    }
    for &(u, v) in &ds.edges {
        w.len(u);
        w.len(v);
    }
    match &ds.split {
        Some(s) => {
            w.u8(1);
            for set in [&s.train, &s.val, &s.test] {
                w.len(set.len());
                for &i in set {
                    w.len(i);
                }
            }
        }
        None => w.u8(0),
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset, CliError> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(DATASET_MAGIC)?;
    let n = r.len(0)?;
    let f = r.len(0)?;
    let classes = r.len(0)?;
    let m = r.len(16)?;
    let features = Tensor::from_vec(n, f, r.f64s(n.checked_mul(f).ok_or_else(|| r.err("bad dims"))?)?)?;
    let labels = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        edges.push((r.u64()? as usize, r.u64()? as usize));
    }
    let split = match r.u8()? {
        0 => None,
        1 => {
            let mut sets = Vec::with_capacity(3);
            for _ in 0..3 {
                let k = r.len(8)?;
                let set = (0..k).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
                if set.iter().any(|&i| i >= n) {
                    return Err(r.err("split index out of range"));
                }
                sets.push(set);
            }
            let test = sets.pop().unwrap_or_default();
            let val = sets.pop().unwrap_or_default();
            let train = sets.pop().unwrap_or_default();
            Some(Split { train, val, test })
        }
        t => return Err(r.err(format!("bad split flag {t}"))),
    };
    r.finish()?;
    let mut ds = Dataset::new(features, labels, edges)?;
    if ds.class_count > classes {
        return Err(r.err(format!("labels exceed the stored class count {classes}")));
    }
    ds.class_count = classes;
    ds.split = split;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), CliError> {
    write_all(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    decode_dataset(&read_all(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdc_core::data::{make_split, two_clusters};

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn two_line_content() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c", "a\t1\t0\tX\nb\t0\t1\tY\n");
        let e = write(dir.path(), "e", "a\tb\n");
        let l = load_content_cites(&c, &e).unwrap();
        assert_eq!(l.dataset.n_nodes(), 2);
        assert_eq!(l.dataset.edges, vec![(0, 1)]);
        assert_eq!(l.dataset.class_count, 2);
        let c = write(dir.path(), "c2", "a\t1\t0\tX\nb\t0\t1\tX\n");
        assert_eq!(load_content_cites(&c, &e).unwrap().dataset.class_count, 1);
    }

    #[test]
    fn unknown_ids_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "c", "a\t1\tX\nb\t0\tY\n");
        let e = write(dir.path(), "e", "a\tb\na\tzzz\nb\tb\n");
        let l = load_content_cites(&c, &e).unwrap();
        assert_eq!((l.skipped_unknown, l.skipped_self_loops, l.cites_lines), (1, 1, 3));
        assert_eq!(l.dataset.edges.len(), 1);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e", "");
        let c = write(dir.path(), "c", "a\t1\tX\nb\tq\tY\n");
        match load_content_cites(&c, &e) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let c = write(dir.path(), "d", "a\t1\tX\na\t0\tY\n");
        let msg = load_content_cites(&c, &e).unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn dataset_cache_round_trip() {
        let ds = make_split(two_clusters(5).unwrap(), 2, 2, 4).unwrap();
        let bytes = encode_dataset(&ds);
        assert_eq!(&bytes[..4], b"GDCD");
        let back = decode_dataset(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = vec![
            LayerParams {
                weight: Tensor::from_rows(&[&[1.0, -2.5], &[0.1, f64::MIN_POSITIVE]]).unwrap(),
                bias: Some(Tensor::from_rows(&[&[0.3, 0.4]]).unwrap()),
                drop: DropParam::Learned(KumaraswamyParams::new(1.0, 3.0).unwrap()),
            },
            LayerParams { weight: Tensor::zeros(2, 1), bias: None, drop: DropParam::Fixed(0.5) },
        ];
        let bytes = encode_checkpoint(&params);
        assert_eq!(decode_checkpoint(&bytes, Path::new("mem")).unwrap(), params);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("mem")).is_err());
    }
}
