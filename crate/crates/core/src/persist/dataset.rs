use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::intercoord::IcSample;
use crate::numcore::Tensor;
use crate::pra::{Association, PraSample};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IcRecord {
    k: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    #[serde(default)]
    augmented: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PraRecord {
    k: usize,
    t_f: usize,
    n_b: usize,
    /// `[t_f × k]`
    r: Vec<f64>,
    /// `[n_b × t_f × k]` of 0/1
    m: Vec<f64>,
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one record per non-blank line, handing each to `f` as it arrives.
fn read_lines<T: DeserializeOwned>(
    path: &Path,
    mut f: impl FnMut(usize, T) -> Result<()>,
) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        f(i + 1, rec)?;
    }
    Ok(())
}

fn at_line(line: usize, e: Error) -> Error {
    Error::Parse { line, column: 0, message: e.to_string() }
}

pub fn save_ic_dataset(path: &Path, samples: &[IcSample]) -> Result<()> {
    write_lines(
        path,
        samples.iter().map(|s| IcRecord {
            k: s.k,
            x: s.x.data().to_vec(),
            y: s.y.clone(),
            augmented: s.augmented,
        }),
    )
}

pub fn load_ic_dataset(path: &Path) -> Result<Vec<IcSample>> {
    let mut out = Vec::new();
    read_lines(path, |line, r: IcRecord| {
        if r.x.len() != r.k * r.k || r.y.len() != r.k {
            return Err(at_line(line, Error::shape(format!(
                "declared k = {} but x has {} and y has {} values",
                r.k,
                r.x.len(),
                r.y.len()
            ))));
        }
        let x = Tensor::matrix(r.k, r.k, r.x).map_err(|e| at_line(line, e))?;
        out.push(IcSample::new(x, r.y, r.augmented).map_err(|e| at_line(line, e))?);
        Ok(())
    })?;
    Ok(out)
}

pub fn save_pra_dataset(path: &Path, samples: &[PraSample]) -> Result<()> {
    write_lines(
        path,
        samples.iter().map(|s| PraRecord {
            k: s.k,
            t_f: s.assoc.t_f,
            n_b: s.assoc.n_b,
            r: s.rates.data().to_vec(),
            m: s.assoc.to_masks(),
        }),
    )
}

pub fn load_pra_dataset(path: &Path) -> Result<Vec<PraSample>> {
    let mut out = Vec::new();
    read_lines(path, |line, r: PraRecord| {
        if r.r.len() != r.t_f * r.k {
            return Err(at_line(line, Error::shape(format!(
                "declared {}×{} rates but found {} values",
                r.t_f,
                r.k,
                r.r.len()
            ))));
        }
        let assoc = Association::from_masks(r.n_b, r.t_f, r.k, &r.m).map_err(|e| at_line(line, e))?;
        let rates = Tensor::matrix(r.t_f, r.k, r.r).map_err(|e| at_line(line, e))?;
        out.push(PraSample::new(rates, assoc).map_err(|e| at_line(line, e))?);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intercoord::{make_ic_dataset, IcConfig, WmmseConfig};
    use crate::pra::{make_pra_dataset, PraConfig};

    #[test]
    fn ic_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ic.jsonl");
        save_ic_dataset(&p, &[]).unwrap();
        assert!(load_ic_dataset(&p).unwrap().is_empty());
        let d = make_ic_dataset(20, 5, &IcConfig::default(), &WmmseConfig::default(), 3).unwrap();
        save_ic_dataset(&p, &d).unwrap();
        assert_eq!(load_ic_dataset(&p).unwrap(), d);
    }

    #[test]
    fn pra_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pra.jsonl");
        let d = make_pra_dataset(&PraConfig::default(), 10, None, 4).unwrap();
        save_pra_dataset(&p, &d).unwrap();
        assert_eq!(load_pra_dataset(&p).unwrap(), d);
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"k\":1,\"x\":[1.0],\"y\":[0.5]}\n{\"k\":2,\"x\":[1.0],\"y\":[0.5]}\n").unwrap();
        assert!(matches!(load_ic_dataset(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "{\"k\":1,\"x\":[1.0],\"y\":[0.5]}\nnot json\n").unwrap();
        assert!(matches!(load_ic_dataset(&p), Err(Error::Parse { line: 2, .. })));
        assert!(load_ic_dataset(&dir.path().join("missing")).unwrap_err().is_io());
    }
}
