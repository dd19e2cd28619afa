//! Runs a configured experiment and writes per-figure CSV files.
//!
//! Output layout under the output directory:
//!
//! - `fig3_channel_gain.csv`: mean received power with and without the IRS
//!   per SNR point;
//! - `fig4_standalone_{irs,no_irs}.csv`, `fig5_decoupled_{irs,no_irs}.csv`,
//!   `rounds_fedavg_{irs,no_irs}.csv`: seed-averaged metrics per round and SNR,
//!   one file per scheme and IRS setting that was run;
//! - `fig6_comparison.csv`, `fig7_pd.csv`: final-round metrics of every
//!   scheme with the IRS on, written when more than one scheme runs;
//! - `history/`: per-node training history of every (scheme, IRS, SNR, seed)
//!   cell.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::collab::{run_scheme, RunOutput, Scheme};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, Evaluation, MetricsRecord};
use crate::rng::{substream, tag};
use crate::simgen::{make_dataset, Dataset};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Received power with and without the IRS at one SNR point, averaged over
/// seed geometries. Powers are in dB relative to the PU transmit level.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub snr_db: f64,
    pub seed_count: usize,
    pub direct_gain_db: f64,
    pub irs_gain_db: f64,
    pub received_no_irs_db: f64,
    pub received_irs_db: f64,
}

impl GainRow {
    pub fn irs_benefit_db(&self) -> f64 {
        self.received_irs_db - self.received_no_irs_db
    }
}

const GAIN_COLUMNS: [&str; 8] = [
    "snr_db",
    "seed_count",
    "direct_gain_db",
    "irs_gain_db",
    "received_no_irs_db",
    "received_irs_db",
    "irs_benefit_db",
    "pu_power",
];

/// Mean direct and reflected gains of each seed's geometry, combined with the
/// noise floor implied by every SNR point.
pub fn channel_gain_sweep(cfg: &ExperimentConfig) -> Result<Vec<GainRow>> {
    let mut direct = 0.0;
    let mut reflected = 0.0;
    for &seed in &cfg.seeds {
        let env = cfg.env(seed, true)?;
        direct += env.mean_direct_gain()?;
        reflected += env.mean_irs_gain()?;
    }
    let n = cfg.seeds.len() as f64;
    let (direct, reflected) = (direct / n, reflected / n);
    let power = cfg.spectrum.pu_power;
    let mut snrs = cfg.snr_list.clone();
    snrs.sort_by(f64::total_cmp);
    Ok(snrs
        .into_iter()
        .map(|snr_db| {
            let noise = direct * power / 10f64.powf(snr_db / 10.0);
            GainRow {
                snr_db,
                seed_count: cfg.seeds.len(),
                direct_gain_db: db(direct),
                irs_gain_db: db(reflected),
                received_no_irs_db: db(direct * power + noise),
                received_irs_db: db((direct + reflected) * power + noise),
            }
        })
        .collect())
}

fn write_gain_csv(path: &Path, rows: &[GainRow], pu_power: f64) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.snr_db.to_string(),
                r.seed_count.to_string(),
                r.direct_gain_db.to_string(),
                r.irs_gain_db.to_string(),
                r.received_no_irs_db.to_string(),
                r.received_irs_db.to_string(),
                r.irs_benefit_db().to_string(),
                pu_power.to_string(),
            ]
        })
        .collect();
    write_rows(path, &GAIN_COLUMNS, &rows)
}

fn irs_tag(irs: bool) -> &'static str {
    if irs {
        "irs"
    } else {
        "no_irs"
    }
}

/// File holding the per-round metrics of `scheme`.
pub fn rounds_file_name(scheme: Scheme, irs: bool) -> String {
    let stem = match scheme {
        Scheme::Standalone => "fig4_standalone",
        Scheme::Decoupled => "fig5_decoupled",
        Scheme::Fedavg => "rounds_fedavg",
    };
    format!("{stem}_{}.csv", irs_tag(irs))
}

pub const COMPARISON_FILE: &str = "fig6_comparison.csv";
pub const PD_FILE: &str = "fig7_pd.csv";
pub const GAIN_FILE: &str = "fig3_channel_gain.csv";

/// Datasets of every node for one (seed, SNR, IRS) cell. The draws depend on
/// seed, SNR and node only, so IRS on and off see the same occupancy,
/// shadowing and noise.
pub fn cell_datasets(cfg: &ExperimentConfig, seed: u64, snr_db: f64, irs: bool) -> Result<Vec<Dataset>> {
    let env = cfg.env(seed, irs)?;
    let spectrum = cfg.spectrum(snr_db);
    (0..cfg.topology.n_nodes)
        .map(|j| {
            let mut rng = substream(seed, &[tag::DATA, snr_db.to_bits(), j as u64]);
            make_dataset(&env, &spectrum, j, cfg.n_train_per_node(), cfg.n_test_per_node(), &mut rng)
        })
        .collect()
}

fn evaluations(run: &RunOutput, irs: bool, snr_db: f64, seed: u64) -> Vec<Evaluation> {
    run.rounds
        .iter()
        .map(|r| Evaluation {
            scheme: run.scheme,
            irs,
            snr_db,
            seed,
            round: r.round,
            accuracy: r.confusion.accuracy().unwrap_or(0.0),
            pd: r.confusion.pd(),
            pfa: r.confusion.pfa(),
            mean_loss: r.mean_loss,
            bytes_exchanged: r.bytes_exchanged,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// Seed-averaged metrics of every (scheme, IRS, SNR, round) group.
    pub records: Vec<MetricsRecord>,
    pub gains: Vec<GainRow>,
    /// Every file written, relative to the output directory, sorted.
    pub files: Vec<PathBuf>,
}

impl ExperimentOutput {
    /// Final-round record of one curve point.
    pub fn final_record(&self, scheme: Scheme, irs: bool, snr_db: f64) -> Option<&MetricsRecord> {
        self.records
            .iter()
            .filter(|r| r.scheme == scheme && r.irs == irs && r.snr_db == snr_db)
            .max_by_key(|r| r.round)
    }
}

/// Runs every configured (scheme, IRS, SNR, seed) cell and writes the result
/// files under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut files = Vec::new();
    let gains = channel_gain_sweep(cfg)?;
    write_gain_csv(&out_dir.join(GAIN_FILE), &gains, cfg.spectrum.pu_power)?;
    files.push(PathBuf::from(GAIN_FILE));

    let compared: Vec<Scheme> = cfg.compared_schemes().collect();
    let mut evals = Vec::new();
    for &seed in &cfg.seeds {
        let topology = cfg.observation_topology(seed)?;
        for &snr_db in &cfg.snr_list {
            for irs in [true, false] {
                let schemes: Vec<Scheme> = if irs { cfg.schemes.clone() } else { compared.clone() };
                if schemes.is_empty() {
                    continue;
                }
                let datasets = cell_datasets(cfg, seed, snr_db, irs)?;
                for scheme in schemes {
                    let started = std::time::Instant::now();
                    let run = run_scheme(scheme, cfg.arch(), &datasets, &topology, &cfg.training, seed)?;
                    let history = PathBuf::from("history")
                        .join(format!("{scheme}_{}_snr{snr_db}_seed{seed}.csv", irs_tag(irs)));
                    run.history.write_csv_file(&out_dir.join(&history))?;
                    files.push(history);
                    let cell = evaluations(&run, irs, snr_db, seed);
                    if let Some(last) = cell.last() {
                        log::info!(
                            "{scheme} {} snr {snr_db} seed {seed}: accuracy {:.4} pd {:?} in {:.1?}",
                            irs_tag(irs),
                            last.accuracy,
                            last.pd,
                            started.elapsed()
                        );
                    }
                    evals.extend(cell);
                }
            }
        }
    }

    let records = metrics::aggregate(&evals);
    let mut curves: BTreeMap<(Scheme, bool), Vec<MetricsRecord>> = BTreeMap::new();
    for r in &records {
        curves.entry((r.scheme, r.irs)).or_default().push(r.clone());
    }
    for ((scheme, irs), curve) in &curves {
        let name = rounds_file_name(*scheme, *irs);
        metrics::write_csv_file(&out_dir.join(&name), curve)?;
        files.push(PathBuf::from(name));
    }

    let mut snrs = cfg.snr_list.clone();
    snrs.sort_by(f64::total_cmp);
    let mut finals = Vec::new();
    for &scheme in &cfg.schemes {
        for &snr in &snrs {
            let last = records
                .iter()
                .filter(|r| r.scheme == scheme && r.irs && r.snr_db == snr)
                .max_by_key(|r| r.round);
            finals.extend(last.cloned());
        }
    }
    if cfg.schemes.len() > 1 {
        metrics::write_csv_file(&out_dir.join(COMPARISON_FILE), &finals)?;
        let pd_rows: Vec<Vec<String>> = finals
            .iter()
            .map(|r| {
                let opt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| x.to_string());
                vec![
                    r.scheme.to_string(),
                    r.snr_db.to_string(),
                    r.round.to_string(),
                    r.seed_count.to_string(),
                    opt(r.pd),
                    opt(r.pfa),
                ]
            })
            .collect();
        write_rows(
            &out_dir.join(PD_FILE),
            &["scheme", "snr_db", "round", "seed_count", "pd", "pfa"],
            &pd_rows,
        )?;
        files.push(PathBuf::from(COMPARISON_FILE));
        files.push(PathBuf::from(PD_FILE));
    }
    files.sort();
    Ok(ExperimentOutput { records, gains, files })
}

/// One x/y curve, written as a two-column CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    /// Sorted by strictly increasing x.
    pub points: Vec<(f64, Option<f64>)>,
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    if header.is_empty() || rows.is_empty() {
        return Err(Error::Format {
            what: "results CSV",
            detail: format!("{} has no data rows", path.display()),
        });
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::Format {
        what: "results CSV",
        detail: format!("{} lacks column {name}", path.display()),
    })
}

fn parse_num(s: &str, path: &Path) -> Result<Option<f64>> {
    if s == "null" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format {
        what: "results CSV",
        detail: format!("{}: not a number: {s:?}", path.display()),
    })
}

/// Groups `rows` by `group` column (if any) into series of (`x`, `y`).
fn series_from(path: &Path, prefix: &str, group: Option<&str>, x: &str, y: &str) -> Result<Vec<Series>> {
    let (header, rows) = read_table(path)?;
    let (xi, yi) = (column(&header, x, path)?, column(&header, y, path)?);
    let gi = group.map(|g| column(&header, g, path)).transpose()?;
    let mut groups: BTreeMap<String, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for row in &rows {
        let key = gi.map_or_else(String::new, |g| row[g].clone());
        let xv = parse_num(&row[xi], path)?.ok_or_else(|| Error::Format {
            what: "results CSV",
            detail: format!("{}: null x value", path.display()),
        })?;
        groups.entry(key).or_default().push((xv, parse_num(&row[yi], path)?));
    }
    groups
        .into_iter()
        .map(|(key, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            if points.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Format {
                    what: "results CSV",
                    detail: format!("{}: repeated {x} within one curve", path.display()),
                });
            }
            let name = match group {
                Some("snr_db") => format!("{prefix}_snr{key}"),
                Some(_) => format!("{prefix}_{key}"),
                None => prefix.to_string(),
            };
            Ok(Series {
                name,
                x_label: x.to_string(),
                y_label: y.to_string(),
                points,
            })
        })
        .collect()
}

/// Reshapes the result CSVs in `csv_dir` into one x/y file per curve under
/// `csv_dir/plot/`. Returns the series written.
pub fn emit_plot_data(csv_dir: &Path) -> Result<Vec<Series>> {
    let mut series = Vec::new();
    let mut found = false;
    let gain = csv_dir.join(GAIN_FILE);
    if gain.exists() {
        found = true;
        series.extend(series_from(&gain, "fig3_no_irs", None, "snr_db", "received_no_irs_db")?);
        series.extend(series_from(&gain, "fig3_irs", None, "snr_db", "received_irs_db")?);
    }
    for scheme in Scheme::ALL {
        for irs in [true, false] {
            let name = rounds_file_name(scheme, irs);
            let path = csv_dir.join(&name);
            if path.exists() {
                found = true;
                let stem = name.trim_end_matches(".csv");
                series.extend(series_from(&path, stem, Some("snr_db"), "round", "accuracy")?);
            }
        }
    }
    let comparison = csv_dir.join(COMPARISON_FILE);
    if comparison.exists() {
        found = true;
        series.extend(series_from(&comparison, "fig6", Some("scheme"), "snr_db", "accuracy")?);
    }
    let pd = csv_dir.join(PD_FILE);
    if pd.exists() {
        found = true;
        series.extend(series_from(&pd, "fig7", Some("scheme"), "snr_db", "pd")?);
    }
    if !found {
        return Err(Error::MissingInput(format!("no result CSVs in {}", csv_dir.display())));
    }
    let plot_dir = csv_dir.join("plot");
    for s in &series {
        let rows: Vec<Vec<String>> = s
            .points
            .iter()
            .map(|(x, y)| vec![x.to_string(), y.map_or_else(|| "null".to_string(), |v| v.to_string())])
            .collect();
        write_rows(&plot_dir.join(format!("{}.csv", s.name)), &[&s.x_label, &s.y_label], &rows)?;
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.spectrum.n_bands = 4;
        cfg.spectrum.n_points = 16;
        cfg.topology.n_nodes = 2;
        cfg.data.n_train = 64;
        cfg.data.n_test = 32;
        cfg.arch.shallow_filters = Some(2);
        cfg.training.rounds = 2;
        cfg.seeds = vec![1, 2];
        cfg.snr_list = vec![-10.0, -16.0];
        cfg
    }

    fn read_dir(dir: &Path, files: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
        files.iter().map(|f| (f.clone(), std::fs::read(dir.join(f)).unwrap())).collect()
    }

    #[test]
    fn writes_every_figure_and_is_reproducible() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, a.path()).unwrap();
        let again = run_experiment(&cfg, b.path()).unwrap();
        assert_eq!(out.files, again.files);
        assert_eq!(read_dir(a.path(), &out.files), read_dir(b.path(), &again.files));
        for name in [
            GAIN_FILE,
            "fig4_standalone_irs.csv",
            "fig4_standalone_no_irs.csv",
            "fig5_decoupled_irs.csv",
            "rounds_fedavg_irs.csv",
            COMPARISON_FILE,
            PD_FILE,
        ] {
            assert!(out.files.contains(&PathBuf::from(name)), "{name}");
        }
        assert!(!out.files.contains(&PathBuf::from("fig5_decoupled_no_irs.csv")));
        // 2 seeds x 2 SNRs x (3 schemes with IRS + standalone without)
        assert_eq!(out.files.iter().filter(|f| f.starts_with("history")).count(), 16);
        let comparison = std::fs::read_to_string(a.path().join(COMPARISON_FILE)).unwrap();
        let mut lines = comparison.lines();
        assert_eq!(lines.next().unwrap(), metrics::CSV_COLUMNS.join(","));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 6);
        assert!(rows[0].starts_with("standalone,-16,2,2,"));
        let rec = out.final_record(Scheme::Decoupled, true, -10.0).unwrap();
        assert_eq!((rec.round, rec.seed_count), (2, 2));
    }

    #[test]
    fn single_scheme_writes_only_its_files() {
        let mut cfg = tiny_config();
        cfg.schemes = vec![Scheme::Standalone];
        cfg.seeds = vec![3];
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path()).unwrap();
        let top: Vec<PathBuf> = out.files.iter().filter(|f| !f.starts_with("history")).cloned().collect();
        let expected: Vec<PathBuf> = [GAIN_FILE, "fig4_standalone_irs.csv", "fig4_standalone_no_irs.csv"]
            .into_iter()
            .map(PathBuf::from)
            .collect();
        assert_eq!(top, expected);
        assert!(!dir.path().join(COMPARISON_FILE).exists());
    }

    #[test]
    fn irs_benefit_shrinks_as_snr_drops() {
        let rows = channel_gain_sweep(&ExperimentConfig::desk()).unwrap();
        assert_eq!(rows.iter().map(|r| r.snr_db).collect::<Vec<_>>(), vec![-16.0, -14.0, -12.0, -10.0]);
        for r in &rows {
            assert!(r.received_irs_db > r.received_no_irs_db);
        }
        for w in rows.windows(2) {
            assert!(w[0].irs_benefit_db() < w[1].irs_benefit_db());
        }
    }

    #[test]
    fn plot_series_per_curve() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for scheme in Scheme::ALL {
            for snr in [-10.0, -16.0, -12.0, -14.0] {
                rows.push(MetricsRecord {
                    scheme,
                    irs: true,
                    snr_db: snr,
                    round: 5,
                    seed_count: 3,
                    accuracy: 0.5 + snr / 64.0,
                    pd: if snr == -16.0 { None } else { Some(0.8) },
                    pfa: Some(0.1),
                    mean_loss: 0.2,
                    bytes_exchanged: 0,
                });
            }
        }
        metrics::write_csv_file(&dir.path().join(COMPARISON_FILE), &rows).unwrap();
        let series = emit_plot_data(dir.path()).unwrap();
        assert_eq!(series.len(), 3);
        for s in &series {
            assert_eq!(s.points.len(), 4);
            assert!(s.points.windows(2).all(|w| w[0].0 < w[1].0));
        }
        let text = std::fs::read_to_string(dir.path().join("plot/fig6_decoupled.csv")).unwrap();
        assert_eq!(text.lines().next(), Some("snr_db,accuracy"));
        assert_eq!(text.lines().nth(1), Some("-16,0.25"));
    }

    #[test]
    fn plot_data_needs_results() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plot_data(dir.path()), Err(Error::MissingInput(_))));
        std::fs::write(dir.path().join(COMPARISON_FILE), "").unwrap();
        assert!(emit_plot_data(dir.path()).is_err());
        std::fs::write(dir.path().join(COMPARISON_FILE), metrics::CSV_COLUMNS.join(",") + "\n").unwrap();
        assert!(matches!(emit_plot_data(dir.path()), Err(Error::Format { .. })));
    }
}
