//! Figures for diagnostics CSVs: a matplotlib script that re-reads the CSVs
//! and a self-contained SVG drawn directly, so nothing beyond this crate is
//! needed to look at a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Columns every diagnostics file must carry.
pub const REQUIRED_COLUMNS: [&str; 5] = ["step", "time", "energy_rom", "energy_true", "dat"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// All runs overlaid; the μ panel appears only if some run varies μ.
    Overlay,
    /// Energy, error, μ and DAT panels regardless of content.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Panel {
    Energy,
    Error,
    Mu,
    Dat,
}

impl Panel {
    fn title(self) -> &'static str {
        match self {
            Panel::Energy => "energy",
            Panel::Error => "L2 error",
            Panel::Mu => "mu",
            Panel::Dat => "DAT",
        }
    }
}

/// One diagnostics file, parsed.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub path: PathBuf,
    pub time: Vec<f64>,
    pub energy_rom: Vec<f64>,
    pub energy_true: Vec<f64>,
    pub mu: Option<Vec<f64>>,
    pub l2_error: Option<Vec<f64>>,
    pub dat: Vec<f64>,
}

impl Series {
    fn mu_varies(&self) -> bool {
        match &self.mu {
            Some(m) => m.iter().any(|v| *v != m[0]),
            None => false,
        }
    }
}

/// Reads a diagnostics CSV. Lines starting with `#` are provenance.
pub fn read_series(path: &Path) -> Result<Series> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for name in REQUIRED_COLUMNS {
        if col(name).is_none() {
            return Err(Error::Schema(format!("{name} (missing in {})", path.display())));
        }
    }
    let idx = |name: &str| col(name).expect("checked above");
    let (it, ie, ik, id) = (idx("time"), idx("energy_rom"), idx("energy_true"), idx("dat"));
    let (imu, ierr) = (col("mu"), col("l2_error"));

    let mut s = Series {
        label: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        path: path.to_path_buf(),
        time: vec![],
        energy_rom: vec![],
        energy_true: vec![],
        mu: None,
        l2_error: None,
        dat: vec![],
    };
    let mut mu: Vec<Option<f64>> = vec![];
    let mut err: Vec<Option<f64>> = vec![];
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize, name: &str| -> Result<f64> {
            let cell = rec.get(i).unwrap_or("");
            cell.parse::<f64>()
                .map_err(|_| Error::Schema(format!("{name} (row {}: {cell:?} is not a number)", k + 1)))
        };
        let opt = |i: Option<usize>, name: &str| -> Result<Option<f64>> {
            match i.and_then(|i| rec.get(i)) {
                None | Some("") => Ok(None),
                Some(_) => num(i.unwrap(), name).map(Some),
            }
        };
        s.time.push(num(it, "time")?);
        s.energy_rom.push(num(ie, "energy_rom")?);
        s.energy_true.push(num(ik, "energy_true")?);
        s.dat.push(num(id, "dat")?);
        mu.push(opt(imu, "mu")?);
        err.push(opt(ierr, "l2_error")?);
    }
    if s.time.is_empty() {
        return Err(Error::Schema(format!("time (no rows in {})", path.display())));
    }
    s.mu = complete(mu, "mu")?;
    s.l2_error = complete(err, "l2_error")?;
    Ok(s)
}

/// An optional column is either entirely empty or entirely filled.
fn complete(v: Vec<Option<f64>>, name: &str) -> Result<Option<Vec<f64>>> {
    let filled = v.iter().filter(|x| x.is_some()).count();
    if filled == 0 {
        Ok(None)
    } else if filled == v.len() {
        Ok(Some(v.into_iter().map(|x| x.unwrap()).collect()))
    } else {
        Err(Error::Schema(format!("{name} (partially empty)")))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Panels drawn for a set of runs.
pub fn panels_for(series: &[Series], kind: PlotKind) -> Vec<Panel> {
    if kind == PlotKind::Adaptive {
        return vec![Panel::Energy, Panel::Error, Panel::Mu, Panel::Dat];
    }
    let mut p = vec![Panel::Energy];
    if series.iter().any(|s| s.l2_error.is_some()) {
        p.push(Panel::Error);
    }
    if series.iter().any(Series::mu_varies) {
        p.push(Panel::Mu);
    }
    p.push(Panel::Dat);
    p
}

/// Files written by [`emit_plots`].
#[derive(Clone, Debug)]
pub struct PlotOutput {
    pub script: PathBuf,
    pub svg: PathBuf,
    pub panels: Vec<Panel>,
}

/// Writes `<name>.py` and `<name>.svg` into `out_dir`.
pub fn emit_plots(csv_paths: &[PathBuf], kind: PlotKind, out_dir: &Path, name: &str) -> Result<PlotOutput> {
    if csv_paths.is_empty() {
        return Err(Error::Config("no CSV files to plot".into()));
    }
    let series = csv_paths.iter().map(|p| read_series(p)).collect::<Result<Vec<_>>>()?;
    let panels = panels_for(&series, kind);
    fs::create_dir_all(out_dir)?;
    let script = out_dir.join(format!("{name}.py"));
    let svg = out_dir.join(format!("{name}.svg"));
    fs::write(&script, script_text(csv_paths, &panels, &format!("{name}.pdf")))?;
    fs::write(&svg, svg_text(&series, &panels))?;
    Ok(PlotOutput { script, svg, panels })
}

fn py_str(s: &str) -> String {
    format!("{s:?}")
}

fn script_text(paths: &[PathBuf], panels: &[Panel], figure: &str) -> String {
    let mut o = String::new();
    o.push_str("import os\nimport pandas as pd\nimport matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n");
    o.push_str("RUNS = [\n");
    for p in paths {
        let _ = writeln!(o, "    {},", py_str(&p.to_string_lossy()));
    }
    o.push_str("]\n\n");
    let _ = writeln!(o, "fig, axes = plt.subplots({}, 1, sharex=True, figsize=(7, {:.1}))", panels.len(), 2.2 * panels.len() as f64);
    if panels.len() == 1 {
        o.push_str("axes = [axes]\n");
    }
    o.push_str("for path in RUNS:\n    d = pd.read_csv(path, comment=\"#\")\n    label = path.rsplit(\"/\", 1)[-1].rsplit(\".\", 1)[0]\n");
    for (i, p) in panels.iter().enumerate() {
        match p {
            Panel::Energy => {
                let _ = writeln!(o, "    axes[{i}].plot(d.time, d.energy_rom, label=label)");
                let _ = writeln!(o, "    axes[{i}].plot(d.time, d.energy_true, \"k--\", lw=0.8)");
            }
            Panel::Error => {
                let _ = writeln!(o, "    if \"l2_error\" in d and d.l2_error.notna().all():");
                let _ = writeln!(o, "        axes[{i}].semilogy(d.time, d.l2_error, label=label)");
            }
            Panel::Mu => {
                let _ = writeln!(o, "    if \"mu\" in d:");
                let _ = writeln!(o, "        axes[{i}].plot(d.time, d.mu, label=label)");
            }
            Panel::Dat => {
                let _ = writeln!(o, "    axes[{i}].plot(d.time, d.dat, label=label)");
            }
        }
    }
    for (i, p) in panels.iter().enumerate() {
        let _ = writeln!(o, "axes[{i}].set_ylabel({})", py_str(p.title()));
    }
    let _ = writeln!(o, "axes[0].legend(fontsize=\"small\")\naxes[-1].set_xlabel(\"t\")");
    let _ = writeln!(o, "fig.tight_layout()\nfig.savefig(os.path.join(os.path.dirname(os.path.abspath(__file__)), {}))", py_str(figure));
    o
}

const W: f64 = 640.0;
const PH: f64 = 180.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 24.0;
const MB: f64 = 30.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_text(series: &[Series], panels: &[Panel]) -> String {
    let h = PH * panels.len() as f64;
    let mut o = String::new();
    let _ = writeln!(
        o,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{h}\" viewBox=\"0 0 {W} {h}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(o, "<rect width=\"{W}\" height=\"{h}\" fill=\"white\"/>");
    let t0 = series.iter().map(|s| s.time[0]).fold(f64::INFINITY, f64::min);
    let t1 = series.iter().map(|s| *s.time.last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    for (pi, panel) in panels.iter().enumerate() {
        let top = pi as f64 * PH;
        let log = *panel == Panel::Error;
        let mut lines: Vec<(usize, &[f64], &[f64], bool)> = vec![];
        for (si, s) in series.iter().enumerate() {
            match panel {
                Panel::Energy => {
                    lines.push((si, &s.time, &s.energy_rom, false));
                    lines.push((si, &s.time, &s.energy_true, true));
                }
                Panel::Error => {
                    if let Some(e) = &s.l2_error {
                        lines.push((si, &s.time, e, false));
                    }
                }
                Panel::Mu => {
                    if let Some(m) = &s.mu {
                        lines.push((si, &s.time, m, false));
                    }
                }
                Panel::Dat => lines.push((si, &s.time, &s.dat, false)),
            }
        }
        let tr = |v: f64| if log { v.log10() } else { v };
        let ys = lines.iter().flat_map(|l| l.2.iter().cloned()).filter(|v| v.is_finite() && (!log || *v > 0.0));
        let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(tr(v)), b.max(tr(v))));
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if y1 - y0 <= 1e-12 * y1.abs().max(1.0) {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let (x0, x1) = (ML, W - MR);
        let (py0, py1) = (top + PH - MB, top + MT);
        let sx = |t: f64| x0 + (t - t0) / (t1 - t0).max(f64::MIN_POSITIVE) * (x1 - x0);
        let sy = |v: f64| py0 + (tr(v) - y0) / (y1 - y0) * (py1 - py0);

        let _ = writeln!(o, "<g>");
        let _ = writeln!(
            o,
            "<rect x=\"{x0:.1}\" y=\"{py1:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>",
            x1 - x0,
            py0 - py1
        );
        let _ = writeln!(o, "<text x=\"{x0:.1}\" y=\"{:.1}\">{}{}</text>", top + 16.0, panel.title(), if log { " (log)" } else { "" });
        let fmt = |v: f64| if log { format!("{:.2e}", 10f64.powf(v)) } else { format!("{v:.3e}") };
        let _ = writeln!(o, "<text x=\"{:.1}\" y=\"{py1:.1}\" text-anchor=\"end\" dy=\"0.8em\">{}</text>", x0 - 4.0, fmt(y1));
        let _ = writeln!(o, "<text x=\"{:.1}\" y=\"{py0:.1}\" text-anchor=\"end\">{}</text>", x0 - 4.0, fmt(y0));
        if pi + 1 == panels.len() {
            let _ = writeln!(o, "<text x=\"{x0:.1}\" y=\"{:.1}\">{t0:.3}</text>", py0 + 14.0);
            let _ = writeln!(o, "<text x=\"{x1:.1}\" y=\"{:.1}\" text-anchor=\"end\">t = {t1:.3}</text>", py0 + 14.0);
        }
        for (si, t, v, dashed) in lines {
            let mut pts = String::new();
            for (tt, vv) in t.iter().zip(v) {
                if vv.is_finite() && (!log || *vv > 0.0) {
                    let _ = write!(pts, "{:.2},{:.2} ", sx(*tt), sy(*vv));
                }
            }
            let (color, dash) = if dashed { ("black", " stroke-dasharray=\"4 3\"") } else { (COLORS[si % COLORS.len()], "") };
            let _ = writeln!(
                o,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\"{dash} points=\"{}\"/>",
                pts.trim_end()
            );
        }
        let _ = writeln!(o, "</g>");
    }
    for (si, s) in series.iter().enumerate() {
        let _ = writeln!(
            o,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"{}\">{}</text>",
            W - MR - 4.0,
            MT + 14.0 * (si + 1) as f64,
            COLORS[si % COLORS.len()],
            escape(&s.label)
        );
    }
    o.push_str("</svg>\n");
    o
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
