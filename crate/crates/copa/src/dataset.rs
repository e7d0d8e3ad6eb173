//! CSV datasets: per-site sample files, prevalence-pair files and the
//! manifest tying them to a config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use copa_core::config::{ExperimentConfig, SiteRole};
use copa_core::scm::{LabelPair, MixingMatrix, Sample, SiteDataset, TrueParams};
use copa_core::tabular::{ColumnManifest, Standardizer, ZColumnKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFile {
    pub site_id: String,
    pub role: SiteRole,
    pub samples_file: String,
    pub rows: usize,
    /// Absent when prevalence pairs come from the samples themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_params: Option<TrueParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub columns: ColumnManifest,
    pub x_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<MixingMatrix>,
    pub sites: Vec<SiteFile>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::io(path, &e),
        _ => CliError::Config(format!("{}: {e}", path.display())),
    }
}

fn num(v: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{v:?}")
}

pub fn write_samples(path: &Path, samples: &[Sample], z_dim: usize, x_dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["site_id".to_string(), "y".to_string()];
    header.extend((0..z_dim).map(|j| format!("z_{j}")));
    header.extend((0..x_dim).map(|j| format!("x_{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for s in samples {
        let mut rec = vec![s.site_id.clone(), s.y.to_string()];
        rec.extend(s.z.iter().map(|v| num(*v)));
        rec.extend(s.x.iter().map(|v| num(*v)));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_pairs(path: &Path, pairs: &[LabelPair], z_dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["y".to_string()];
    header.extend((0..z_dim).map(|j| format!("z_{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for p in pairs {
        let mut rec = vec![p.y.to_string()];
        rec.extend(p.z.iter().map(|v| num(*v)));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    csv::Reader::from_path(path).map_err(csv_err(path))
}

/// Positions of `prefix_0, prefix_1, ...` in the header, in index order.
fn indexed_columns(header: &csv::StringRecord, prefix: &str) -> Vec<usize> {
    let mut found: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(pos, h)| h.strip_prefix(prefix).and_then(|r| r.parse::<usize>().ok()).map(|i| (i, pos)))
        .collect();
    found.sort_unstable();
    found.into_iter().map(|(_, pos)| pos).collect()
}

fn check_contiguous(path: &Path, header: &csv::StringRecord, prefix: &str, cols: &[usize]) -> Result<()> {
    for (i, &pos) in cols.iter().enumerate() {
        if header[pos] != format!("{prefix}{i}") {
            return Err(CliError::Config(format!("{}: missing column {prefix}{i}", path.display())));
        }
    }
    Ok(())
}

fn parse_f64(path: &Path, line: usize, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| CliError::Config(format!("{}:{line}: `{v}` is not a finite number", path.display())))
}

fn parse_label(path: &Path, line: usize, v: &str) -> Result<usize> {
    v.trim()
        .parse::<usize>()
        .map_err(|_| CliError::Config(format!("{}:{line}: label `{v}` is not a class index", path.display())))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("{}: missing column {name}", path.display())))
}

/// Reads a sample file with header `site_id, y, z_0.., x_0..`.
pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut r = open_reader(path)?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let site_col = column(&header, "site_id", path)?;
    let y_col = column(&header, "y", path)?;
    let z_cols = indexed_columns(&header, "z_");
    let x_cols = indexed_columns(&header, "x_");
    check_contiguous(path, &header, "z_", &z_cols)?;
    check_contiguous(path, &header, "x_", &x_cols)?;
    if x_cols.is_empty() {
        return Err(CliError::Config(format!("{}: no x_ columns", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let z = z_cols.iter().map(|&c| parse_f64(path, line, &rec[c])).collect::<Result<_>>()?;
        let x = x_cols.iter().map(|&c| parse_f64(path, line, &rec[c])).collect::<Result<_>>()?;
        out.push(Sample {
            x,
            y: parse_label(path, line, &rec[y_col])?,
            z,
            site_id: rec[site_col].to_string(),
        });
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<LabelPair>> {
    let mut r = open_reader(path)?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let y_col = column(&header, "y", path)?;
    let z_cols = indexed_columns(&header, "z_");
    check_contiguous(path, &header, "z_", &z_cols)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        out.push(LabelPair {
            y: parse_label(path, line, &rec[y_col])?,
            z: z_cols.iter().map(|&c| parse_f64(path, line, &rec[c])).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes every site as `<site_id>.csv` (plus `<site_id>.pairs.csv` when it
/// has a separate pool) and a manifest.
pub fn export_dataset(
    dir: &Path,
    config_hash: &str,
    sites: &[(SiteRole, SiteDataset)],
    columns: &ColumnManifest,
    mixing: Option<&MixingMatrix>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let z_dim = columns.z_columns.len();
    let x_dim = sites
        .iter()
        .find_map(|(_, s)| s.samples.first().map(|q| q.x.len()))
        .ok_or_else(|| CliError::Config("no samples to export".into()))?;
    let mut files = Vec::with_capacity(sites.len());
    for (role, site) in sites {
        let samples_file = format!("{}.csv", site.site_id);
        write_samples(&dir.join(&samples_file), &site.samples, z_dim, x_dim)?;
        let pairs_file = if site.pairs_from_samples {
            None
        } else {
            let f = format!("{}.pairs.csv", site.site_id);
            write_pairs(&dir.join(&f), &site.prevalence_pairs, z_dim)?;
            Some(f)
        };
        files.push(SiteFile {
            site_id: site.site_id.clone(),
            role: *role,
            samples_file,
            rows: site.samples.len(),
            pairs_file,
            true_params: site.true_params.clone(),
        });
    }
    let manifest = DatasetManifest {
        config_hash: config_hash.to_string(),
        columns: columns.clone(),
        x_dim,
        mixing: mixing.cloned(),
        sites: files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<(SiteRole, SiteDataset)>)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut sites = Vec::with_capacity(manifest.sites.len());
    for f in &manifest.sites {
        let samples = read_samples(&dir.join(&f.samples_file))?;
        if samples.len() != f.rows {
            return Err(CliError::Config(format!(
                "{}: expected {} rows, found {}",
                f.samples_file,
                f.rows,
                samples.len()
            )));
        }
        let mut site = SiteDataset::from_samples(f.site_id.clone(), samples);
        if let Some(p) = &f.pairs_file {
            site.prevalence_pairs = read_pairs(&dir.join(p))?;
            site.pairs_from_samples = false;
        }
        site.true_params = f.true_params.clone();
        sites.push((f.role, site));
    }
    Ok((manifest, sites))
}

/// Loads a single tabular CSV holding every site, assigns roles from the
/// config and standardizes continuous `z` columns with training-site
/// statistics.
pub fn load_tabular(
    cfg: &ExperimentConfig,
    csv_path: &Path,
    manifest_path: &Path,
) -> Result<(Vec<(SiteRole, SiteDataset)>, ColumnManifest)> {
    let columns: ColumnManifest = read_json(manifest_path)?;
    let samples = read_samples(csv_path)?;
    let mut by_site: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        if s.z.len() != columns.z_columns.len() {
            return Err(CliError::Config(format!(
                "{}: {} z columns but the manifest declares {}",
                csv_path.display(),
                s.z.len(),
                columns.z_columns.len()
            )));
        }
        for (v, kind) in s.z.iter().zip(&columns.z_columns) {
            if *kind == ZColumnKind::Categorical && (v.fract() != 0.0 || *v < 0.0) {
                return Err(CliError::Config(format!(
                    "{}: categorical z value {v} is not a non-negative integer",
                    csv_path.display()
                )));
            }
        }
        if s.y >= cfg.classes {
            return Err(CliError::Config(format!("label {} outside 0..{}", s.y, cfg.classes)));
        }
        by_site.entry(s.site_id.clone()).or_default().push(s);
    }
    let mut sites = Vec::with_capacity(cfg.sites.len());
    for entry in &cfg.sites {
        let samples = by_site
            .remove(&entry.site_id)
            .ok_or_else(|| CliError::Config(format!("site `{}` has no rows in {}", entry.site_id, csv_path.display())))?;
        sites.push((entry.role, SiteDataset::from_samples(entry.site_id.clone(), samples)));
    }
    if let Some(extra) = by_site.keys().next() {
        return Err(CliError::Config(format!("site `{extra}` in the CSV is not in the config")));
    }
    if !columns.all_categorical() {
        let st = Standardizer::fit(&columns, sites.iter().filter(|(r, _)| *r == SiteRole::Train).map(|(_, s)| s))?;
        for (_, s) in sites.iter_mut() {
            st.apply_site(s);
        }
    }
    Ok((sites, columns))
}

/// Resolves a path from a config file relative to that file's directory.
pub fn relative_to(config_path: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
