//! Tab-separated text files with a versioned `#onerec-…` header line.
//!
//! ```text
//! catalog.tsv  #onerec-catalog v1 dim=D clusters=C seed=S
//!              item_id  cluster  v1,v2,...,vD
//! users.tsv    #onerec-users v1 dim=D
//!              user_id  w_watch,w_time,w_like,w_follow  p1,...,pD  history ids (comma separated, may be empty)
//! logs.tsv     #onerec-logs v1
//!              user_id  history ids  session ids  vtr swt ltr wtr (0/1)  watch times (comma separated)
//! ```
//!
//! Floats are written in shortest round-trip form, so files reload bit-exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{InteractionLog, SessionLabels, SyntheticCatalog, SyntheticUser, TargetWeights};
use crate::error::{Error, Result};
use crate::tokenizer::{ItemEmbedding, ItemId};

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{x}").expect("string write");
    }
    s
}

fn split_list<T: FromStr>(field: &str, ctx: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(',').map(|x| x.parse::<T>().map_err(|e| Error::parse(ctx, format!("{x:?}: {e}")))).collect()
}

fn ids(field: &str, ctx: &str) -> Result<Vec<ItemId>> {
    Ok(split_list::<u32>(field, ctx)?.into_iter().map(ItemId).collect())
}

fn header_value(header: &str, key: &str) -> Option<u64> {
    header.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn body<'a>(text: &'a str, magic: &str, path: &Path) -> Result<(&'a str, impl Iterator<Item = (usize, &'a str)>)> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or("");
    if !header.starts_with(magic) || header.split_whitespace().nth(1) != Some("v1") {
        return Err(Error::parse(path.display().to_string(), format!("expected header {magic} v1")));
    }
    Ok((header, lines.filter(|(_, l)| !l.trim().is_empty())))
}

pub fn write_catalog(path: &Path, catalog: &SyntheticCatalog) -> Result<()> {
    let mut s = format!(
        "#onerec-catalog v1 dim={} clusters={} seed={}\n",
        catalog.dim,
        catalog.centers.len(),
        catalog.seed
    );
    for (e, c) in catalog.items.iter().zip(&catalog.clusters) {
        writeln!(s, "{}\t{}\t{}", e.id, c, join(&e.vector)).expect("string write");
    }
    write(path, &s)
}

/// Reads a catalog. Cluster centers are not stored and come back empty.
pub fn read_catalog(path: &Path) -> Result<SyntheticCatalog> {
    let text = read(path)?;
    let (header, lines) = body(&text, "#onerec-catalog", path)?;
    let dim = header_value(header, "dim").ok_or_else(|| Error::parse("catalog header", "missing dim"))? as usize;
    let seed = header_value(header, "seed").unwrap_or(0);
    let (mut items, mut clusters) = (Vec::new(), Vec::new());
    for (n, line) in lines {
        let ctx = format!("{}:{}", path.display(), n + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::parse(ctx, "expected 3 tab-separated fields"));
        }
        let id: u32 = f[0].parse().map_err(|_| Error::parse(&ctx, "bad item id"))?;
        if id as usize != items.len() {
            return Err(Error::parse(ctx, "item ids must be 0..n in order"));
        }
        let vector: Vec<f64> = split_list(f[2], &ctx)?;
        if vector.len() != dim {
            return Err(Error::parse(ctx, format!("embedding has {} values, header says {dim}", vector.len())));
        }
        clusters.push(f[1].parse().map_err(|_| Error::parse(&ctx, "bad cluster"))?);
        items.push(ItemEmbedding { id: ItemId(id), vector });
    }
    Ok(SyntheticCatalog { items, clusters, centers: Vec::new(), dim, seed })
}

pub fn write_users(path: &Path, users: &[SyntheticUser]) -> Result<()> {
    let dim = users.first().map_or(0, |u| u.preference.len());
    let mut s = format!("#onerec-users v1 dim={dim}\n");
    for u in users {
        let w = &u.weights;
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            u.id,
            join([w.watch, w.time, w.like, w.follow]),
            join(&u.preference),
            join(&u.history)
        )
        .expect("string write");
    }
    write(path, &s)
}

pub fn read_users(path: &Path) -> Result<Vec<SyntheticUser>> {
    let text = read(path)?;
    let (_, lines) = body(&text, "#onerec-users", path)?;
    let mut users = Vec::new();
    for (n, line) in lines {
        let ctx = format!("{}:{}", path.display(), n + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(ctx, "expected 4 tab-separated fields"));
        }
        let w: Vec<f64> = split_list(f[1], &ctx)?;
        if w.len() != 4 {
            return Err(Error::parse(ctx, "expected 4 target weights"));
        }
        users.push(SyntheticUser {
            id: f[0].parse().map_err(|_| Error::parse(&ctx, "bad user id"))?,
            weights: TargetWeights { watch: w[0], time: w[1], like: w[2], follow: w[3] },
            preference: split_list(f[2], &ctx)?,
            history: ids(f[3], &ctx)?,
        });
    }
    Ok(users)
}

pub fn write_logs(path: &Path, logs: &[InteractionLog]) -> Result<()> {
    let mut s = String::from("#onerec-logs v1\n");
    for l in logs {
        let b = |x: bool| u8::from(x);
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            l.user,
            join(&l.history),
            join(&l.session),
            b(l.labels.vtr),
            b(l.labels.swt),
            b(l.labels.ltr),
            b(l.labels.wtr),
            join(&l.watch_times)
        )
        .expect("string write");
    }
    write(path, &s)
}

pub fn read_logs(path: &Path) -> Result<Vec<InteractionLog>> {
    let text = read(path)?;
    let (_, lines) = body(&text, "#onerec-logs", path)?;
    let mut logs = Vec::new();
    for (n, line) in lines {
        let ctx = format!("{}:{}", path.display(), n + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::parse(ctx, "expected 8 tab-separated fields"));
        }
        let flag = |x: &str| match x {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::parse(&ctx, format!("label must be 0 or 1, got {x:?}"))),
        };
        let session = ids(f[2], &ctx)?;
        let watch_times: Vec<f64> = split_list(f[7], &ctx)?;
        if watch_times.len() != session.len() {
            return Err(Error::parse(ctx, "one watch time per session item required"));
        }
        logs.push(InteractionLog {
            user: f[0].parse().map_err(|_| Error::parse(&ctx, "bad user id"))?,
            history: ids(f[1], &ctx)?,
            session,
            labels: SessionLabels { vtr: flag(f[3])?, swt: flag(f[4])?, ltr: flag(f[5])?, wtr: flag(f[6])? },
            watch_times,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{SimConfig, World};

    #[test]
    fn files_round_trip_exactly() {
        let cfg = SimConfig { num_items: 60, dim: 4, num_clusters: 3, num_users: 7, history_len: 3, ..SimConfig::default() };
        let w = World::generate(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, u, l) = (dir.path().join("c.tsv"), dir.path().join("u.tsv"), dir.path().join("l.tsv"));
        write_catalog(&c, &w.catalog).unwrap();
        write_users(&u, &w.users).unwrap();
        write_logs(&l, &w.logs).unwrap();
        let cat = read_catalog(&c).unwrap();
        assert_eq!(cat.items, w.catalog.items);
        assert_eq!(cat.clusters, w.catalog.clusters);
        assert_eq!(read_users(&u).unwrap(), w.users);
        assert_eq!(read_logs(&l).unwrap(), w.logs);
    }

    #[test]
    fn bad_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        assert!(matches!(read_logs(&p), Err(Error::MissingArtifact(_))));
        std::fs::write(&p, "#onerec-logs v2\n").unwrap();
        assert!(matches!(read_logs(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "#onerec-logs v1\n0\t1\t2\t3\t0\t0\t0\t5\n").unwrap();
        assert!(matches!(read_logs(&p), Err(Error::Parse { .. })));
    }
}
