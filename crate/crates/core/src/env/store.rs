//! On-disk episode store.
//!
//! `manifest.tsv` holds one line per episode (id, seed, task, length,
//! success, instruction). Each episode's tensors live in `ep_{id:05}.bin`:
//! magic, version, frame count, height, width, the 8-bit RGB frames, action
//! count, action dim and the actions as little-endian f32.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Episode, TaskSpec, ACTION_DIM, IMAGE_SIZE};
use crate::error::{Error, Result};

pub const STORE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TKEP";
const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub id: usize,
    pub seed: u64,
    pub task: TaskSpec,
    pub length: usize,
    pub success: bool,
    pub instruction: String,
}

fn episode_file(id: usize) -> String {
    format!("ep_{id:05}.bin")
}

pub fn write_episodes(dir: &Path, episodes: &[Episode]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("# episodes v{STORE_VERSION} count={}\n", episodes.len());
    for ep in episodes {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            ep.id,
            ep.seed,
            ep.task,
            ep.frames.len(),
            u8::from(ep.success),
            ep.instruction
        ));
        let path = dir.join(episode_file(ep.id));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            for v in [STORE_VERSION, ep.frames.len() as u32, IMAGE_SIZE as u32, IMAGE_SIZE as u32] {
                w.write_all(&v.to_le_bytes())?;
            }
            for f in &ep.frames {
                w.write_all(f)?;
            }
            w.write_all(&(ep.actions.len() as u32).to_le_bytes())?;
            w.write_all(&(ACTION_DIM as u32).to_le_bytes())?;
            for a in &ep.actions {
                for v in a {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        write().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<EpisodeRecord>> {
    let bad = |line: usize, msg: &str| Error::data(path, format!("line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty manifest"))?;
    if !header.starts_with(&format!("# episodes v{STORE_VERSION} ")) {
        return Err(bad(1, "unsupported manifest header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.splitn(6, '\t').collect();
        if f.len() != 6 {
            return Err(bad(n, "expected 6 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(n, &format!("bad number {s:?}")));
        out.push(EpisodeRecord {
            id: num(f[0])? as usize,
            seed: num(f[1])?,
            task: f[2].parse().map_err(|_| bad(n, "unknown task"))?,
            length: num(f[3])? as usize,
            success: num(f[4])? == 1,
            instruction: f[5].to_string(),
        });
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::data(path, "truncated episode file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_episode(dir: &Path, rec: &EpisodeRecord) -> Result<Episode> {
    let path = dir.join(episode_file(rec.id));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::data(&path, "truncated episode file"))?;
    if &magic != MAGIC {
        return Err(Error::data(&path, "not an episode file"));
    }
    if read_u32(&mut r, &path)? != STORE_VERSION {
        return Err(Error::data(&path, "unsupported episode version"));
    }
    let n = read_u32(&mut r, &path)? as usize;
    let (h, w) = (read_u32(&mut r, &path)? as usize, read_u32(&mut r, &path)? as usize);
    if (h, w) != (IMAGE_SIZE, IMAGE_SIZE) || n != rec.length {
        return Err(Error::data(&path, "frame header disagrees with manifest"));
    }
    let fsize = h * w * 3;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f = vec![0u8; fsize];
        r.read_exact(&mut f).map_err(|_| Error::data(&path, "truncated frames"))?;
        frames.push(f);
    }
    let m = read_u32(&mut r, &path)? as usize;
    let d = read_u32(&mut r, &path)? as usize;
    if d != ACTION_DIM || m + 1 != n {
        return Err(Error::data(&path, "action header disagrees with frames"));
    }
    let mut actions = Vec::with_capacity(m);
    for _ in 0..m {
        let mut a = [0f32; ACTION_DIM];
        for v in &mut a {
            *v = f32::from_bits(read_u32(&mut r, &path)?);
        }
        actions.push(a);
    }
    if !r.is_empty() {
        return Err(Error::data(&path, "trailing bytes"));
    }
    Ok(Episode {
        id: rec.id,
        seed: rec.seed,
        task: rec.task,
        instruction: rec.instruction.clone(),
        frames,
        actions,
        success: rec.success,
    })
}

pub fn read_episodes(dir: &Path) -> Result<Vec<Episode>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = parse_manifest(&path, &text)?;
    records.iter().map(|r| read_episode(dir, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_dataset;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (eps, _) = generate_dataset(5, &[TaskSpec::Single, TaskSpec::LongHorizon], 1).unwrap();
        write_episodes(dir.path(), &eps).unwrap();
        assert_eq!(read_episodes(dir.path()).unwrap(), eps);
    }

    #[test]
    fn corruption_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (eps, _) = generate_dataset(2, &[TaskSpec::Single], 1).unwrap();
        write_episodes(dir.path(), &eps).unwrap();
        let p = dir.path().join("ep_00001.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        match read_episodes(dir.path()) {
            Err(Error::Data { path, .. }) => assert_eq!(path, p),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_episodes(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
