//! Posterior draw serialization: a long CSV and a little-endian binary cache.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ingest::{MigrationPanel, PopulationTable};

use super::{state_index, state_name, PosteriorSample, N_STATE};

pub const DRAWS_HEADER: [&str; 4] = ["chain", "iter", "param", "value"];
const MAGIC: &[u8; 8] = b"NMGDRAW1";

pub fn write_draws_csv<W: Write>(samples: &[PosteriorSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DRAWS_HEADER)?;
    let names: Vec<String> = (0..N_STATE).map(state_name).collect();
    for s in samples {
        let chain = s.chain.to_string();
        let iter = s.iter.to_string();
        for (name, value) in names.iter().zip(s.state()) {
            w.write_record([chain.as_str(), iter.as_str(), name, &value.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<draws>", e))?;
    Ok(())
}

pub fn read_draws_csv<R: Read>(reader: R) -> Result<Vec<PosteriorSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if headers != DRAWS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", DRAWS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    let mut current: Option<(usize, usize, [f64; N_STATE], [bool; N_STATE])> = None;
    let finish = |cur: (usize, usize, [f64; N_STATE], [bool; N_STATE]), line: u64| -> Result<PosteriorSample> {
        let (chain, iter, state, seen) = cur;
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::Parse {
                line,
                message: format!("draw {chain}/{iter} lacks `{}`", state_name(j)),
            });
        }
        Ok(PosteriorSample::from_state(&state, chain, iter))
    };
    let mut line = 1;
    for rec in rdr.records() {
        let rec = rec?;
        line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| Error::Parse { line, message: m };
        let chain: usize = rec[0].parse().map_err(|e| bad(format!("chain: {e}")))?;
        let iter: usize = rec[1].parse().map_err(|e| bad(format!("iter: {e}")))?;
        let j = state_index(&rec[2]).ok_or_else(|| bad(format!("unknown parameter `{}`", &rec[2])))?;
        let value: f64 = rec[3].parse().map_err(|e| bad(format!("value: {e}")))?;
        match &mut current {
            Some((c, i, state, seen)) if *c == chain && *i == iter => {
                if seen[j] {
                    return Err(bad(format!("duplicate `{}` in draw {chain}/{iter}", &rec[2])));
                }
                state[j] = value;
                seen[j] = true;
            }
            _ => {
                if let Some(prev) = current.take() {
                    out.push(finish(prev, line)?);
                }
                let mut state = [0.0; N_STATE];
                let mut seen = [false; N_STATE];
                state[j] = value;
                seen[j] = true;
                current = Some((chain, iter, state, seen));
            }
        }
    }
    if let Some(prev) = current {
        out.push(finish(prev, line)?);
    }
    Ok(out)
}

pub fn write_draws_binary<W: Write>(samples: &[PosteriorSample], mut writer: W) -> std::io::Result<()> {
    writer.write_all(MAGIC)?;
    writer.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        writer.write_all(&(s.chain as u64).to_le_bytes())?;
        writer.write_all(&(s.iter as u64).to_le_bytes())?;
        for v in s.state() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()
}

pub fn read_draws_binary<R: Read>(mut reader: R) -> Result<Vec<PosteriorSample>> {
    let corrupt = |m: &str| Error::Schema(format!("draw cache: {m}"));
    let mut buf8 = [0u8; 8];
    let mut read8 = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut buf8).map_err(|_| corrupt("truncated"))?;
        Ok(buf8)
    };
    if &read8(&mut reader)? != MAGIC {
        return Err(corrupt("bad magic header"));
    }
    let n = u64::from_le_bytes(read8(&mut reader)?) as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let chain = u64::from_le_bytes(read8(&mut reader)?) as usize;
        let iter = u64::from_le_bytes(read8(&mut reader)?) as usize;
        let mut state = [0.0; N_STATE];
        for v in state.iter_mut() {
            *v = f64::from_le_bytes(read8(&mut reader)?);
        }
        out.push(PosteriorSample::from_state(&state, chain, iter));
    }
    Ok(out)
}

/// File-name-safe form of a location name.
fn slug(location: &str) -> String {
    location
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn paths(dir: &Path, location: &str) -> (PathBuf, PathBuf) {
    let s = slug(location);
    (dir.join(format!("{s}.draws.csv")), dir.join(format!("{s}.draws.bin")))
}

/// Writes `<location>.draws.csv` and `<location>.draws.bin` under `dir`.
pub fn save_posterior(dir: &Path, location: &str, samples: &[PosteriorSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (csv_path, bin_path) = paths(dir, location);
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_draws_csv(samples, std::io::BufWriter::new(f))?;
    let f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    write_draws_binary(samples, std::io::BufWriter::new(f)).map_err(|e| Error::io(&bin_path, e))
}

/// Loads draws for `location`, preferring the binary cache.
pub fn load_posterior(dir: &Path, location: &str) -> Result<Vec<PosteriorSample>> {
    let (csv_path, bin_path) = paths(dir, location);
    if let Ok(f) = std::fs::File::open(&bin_path) {
        if let Ok(draws) = read_draws_binary(std::io::BufReader::new(f)) {
            return Ok(draws);
        }
        log::warn!("ignoring unreadable draw cache {}", bin_path.display());
    }
    let f = std::fs::File::open(&csv_path).map_err(|_| Error::MissingArtifact {
        path: csv_path.clone(),
        producer: "fit-bayes",
    })?;
    read_draws_csv(std::io::BufReader::new(f))
}

/// Regional population per panel period from rows of `table` whose
/// location is `region`.
pub fn regional_population(
    table: &PopulationTable,
    region: &str,
    panel: &MigrationPanel,
) -> Result<Vec<Vec<f64>>> {
    panel
        .periods()
        .iter()
        .map(|period| {
            panel
                .grid()
                .labels()
                .map(|age| {
                    table.get(region, period, age).ok_or_else(|| {
                        Error::Consistency(format!(
                            "regional population lacks `{region}` period {period} age {age}"
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn some_draws() -> Vec<PosteriorSample> {
        (0..5)
            .map(|i| {
                let s: [f64; N_STATE] = std::array::from_fn(|j| (i * 31 + j) as f64 / 7.0 + 1e-17);
                PosteriorSample::from_state(&s, i % 2, 100 + i)
            })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let d = some_draws();
        let mut buf = Vec::new();
        write_draws_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("chain,iter,param,value\n0,100,in.a1,"));
        assert_eq!(read_draws_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn binary_round_trip() {
        let d = some_draws();
        let mut buf = Vec::new();
        write_draws_binary(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 5 * (16 + 8 * N_STATE));
        assert_eq!(read_draws_binary(buf.as_slice()).unwrap(), d);
        buf[0] = b'X';
        assert!(read_draws_binary(buf.as_slice()).is_err());
        assert!(read_draws_binary(&buf[..20]).is_err());
    }

    #[test]
    fn incomplete_draw_rejected() {
        let text = "chain,iter,param,value\n0,1,in.a1,0.1\n";
        assert!(matches!(read_draws_csv(text.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_posterior_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        match load_posterior(dir.path(), "King County") {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "fit-bayes"),
            other => panic!("{other:?}"),
        }
        save_posterior(dir.path(), "King County", &some_draws()).unwrap();
        assert_eq!(load_posterior(dir.path(), "King County").unwrap(), some_draws());
        assert!(dir.path().join("King_County.draws.csv").exists());
    }
}
