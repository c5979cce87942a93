//! Renders scan and ablation results as CSV, SVG or JSON.
//!
//! Output depends only on the inputs and their order, so repeated runs are
//! byte-identical.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::intervention::LambdaSweep;
use crate::intervention::{AblationReport, MaskValidation};
use crate::layer_scan::LayerScanResult;
use crate::neuron_scan::NeuronReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no results to report")]
    NoInputs,
    #[error("{source_name}: not a recognised result file")]
    Unrecognized { source_name: String },
    #[error("{source_name}: {message}")]
    Parse { source_name: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Svg,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "svg" => Ok(Format::Svg),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResultFile {
    Layers(LayerScanResult),
    Neurons(Vec<NeuronReport>),
    Neuron(NeuronReport),
    Masking(MaskValidation),
    Ablation(AblationReport),
    Sweeps(Vec<LambdaSweep>),
    Sweep(LambdaSweep),
}

/// Parses one result file; `source_name` labels errors.
pub fn parse_result(source_name: &str, text: &str) -> Result<ResultFile, ReportError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ReportError::Parse {
        source_name: source_name.to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_value(value).map_err(|_| ReportError::Unrecognized { source_name: source_name.to_string() })
}

#[derive(Debug, Default)]
struct Collected<'a> {
    layers: Vec<&'a LayerScanResult>,
    neurons: Vec<&'a NeuronReport>,
    ablations: Vec<&'a AblationReport>,
    sweeps: Vec<&'a LambdaSweep>,
}

fn collect(inputs: &[ResultFile]) -> Result<Collected<'_>, ReportError> {
    if inputs.is_empty() {
        return Err(ReportError::NoInputs);
    }
    let mut c = Collected::default();
    for r in inputs {
        match r {
            ResultFile::Layers(l) => c.layers.push(l),
            ResultFile::Neurons(v) => c.neurons.extend(v.iter()),
            ResultFile::Neuron(n) => c.neurons.push(n),
            ResultFile::Masking(m) => c.ablations.push(&m.report),
            ResultFile::Ablation(a) => c.ablations.push(a),
            ResultFile::Sweeps(v) => c.sweeps.extend(v.iter()),
            ResultFile::Sweep(s) => c.sweeps.push(s),
        }
    }
    Ok(c)
}

pub fn render(inputs: &[ResultFile], format: Format) -> Result<String, ReportError> {
    let c = collect(inputs)?;
    Ok(match format {
        Format::Csv => render_csv(&c),
        Format::Svg => render_svg(&c),
        Format::Json => render_json(&c),
    })
}

/// Latents shown per culture in charts.
const TOP_LATENTS: usize = 16;

fn top_latents(n: &NeuronReport) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n.wfs_cult.len()).collect();
    idx.sort_by(|&a, &b| n.wfs_cult[b].total_cmp(&n.wfs_cult[a]).then(a.cmp(&b)));
    idx.truncate(TOP_LATENTS);
    idx
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(c: &Collected<'_>) -> String {
    let mut out = String::new();
    let section = |title: &str, out: &mut String| {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "# {title}");
    };
    for (i, l) in c.layers.iter().enumerate() {
        section(&format!("layers {i}"), &mut out);
        out.push_str("layer,ca_cult,ca_noun,delta_ca,delta_stderr,sensitive\n");
        for k in 0..l.delta_ca.len() {
            let sensitive = l.sensitive_layers.contains(&k);
            let _ = writeln!(
                out,
                "{k},{},{},{},{},{sensitive}",
                l.ca_cult[k], l.ca_noun[k], l.delta_ca[k], l.delta_stderr[k]
            );
        }
    }
    if !c.neurons.is_empty() {
        section("neurons", &mut out);
        out.push_str("culture,rank,latent,wfs_cult,wfs_noun,f_cult,mu_cult,selected\n");
        for n in &c.neurons {
            for (rank, &z) in top_latents(n).iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{rank},{z},{},{},{},{},{}",
                    csv_field(&n.culture_label),
                    n.wfs_cult[z],
                    n.wfs_noun[z],
                    n.f_cult[z],
                    n.mu_cult[z],
                    n.selected.contains(&z)
                );
            }
        }
    }
    for (i, a) in c.ablations.iter().enumerate() {
        section(&format!("ablation {i}"), &mut out);
        out.push_str("setting,score\n");
        for (name, value) in a.rows() {
            let _ = writeln!(out, "{},{}", csv_field(name), csv_field(&value));
        }
    }
    for s in &c.sweeps {
        section(&format!("lambda sweep {}", s.culture_label), &mut out);
        out.push_str("lambda,energy\n");
        for (l, e) in s.lambdas.iter().zip(&s.energy) {
            let _ = writeln!(out, "{l},{e}");
        }
    }
    out
}

fn render_json(c: &Collected<'_>) -> String {
    let ablation: Vec<serde_json::Value> = c
        .ablations
        .iter()
        .map(|a| {
            let rows: Vec<serde_json::Value> =
                a.rows().iter().map(|(k, v)| serde_json::json!({"setting": k, "score": v})).collect();
            serde_json::json!({ "report": a, "rows": rows })
        })
        .collect();
    let neurons: Vec<serde_json::Value> = c
        .neurons
        .iter()
        .map(|n| {
            serde_json::json!({
                "culture_label": n.culture_label,
                "selected": n.selected,
                "k_selected": n.k_selected,
                "fallback": n.diagnostics.fallback,
                "top_latents": top_latents(n),
            })
        })
        .collect();
    let layers: Vec<serde_json::Value> = c
        .layers
        .iter()
        .map(|l| {
            serde_json::json!({
                "delta_ca": l.delta_ca,
                "sensitive_layers": l.sensitive_layers,
                "top_layer": l.top_layer(),
                "fallback": l.fallback,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "layers": layers,
        "neurons": neurons,
        "ablation": ablation,
        "lambda_sweeps": c.sweeps,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json values serialize");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 40.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bar panel with a zero baseline; `bars` are `(label, value, highlighted)`.
fn bar_panel(out: &mut String, top: f64, title: &str, class: &str, bars: &[(String, f64, bool)]) {
    let _ = writeln!(out, "<g class=\"panel\" transform=\"translate(0,{top:.2})\">");
    let _ = writeln!(out, "<text x=\"{MARGIN:.2}\" y=\"20.00\" font-size=\"14\">{}</text>", esc(title));
    let plot_top = 30.0;
    let plot_h = PANEL_H - plot_top - 30.0;
    let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| plot_top + (hi - v) / span * plot_h;
    let zero = y_of(0.0);
    let n = bars.len().max(1) as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN:.2}\" y1=\"{zero:.2}\" x2=\"{:.2}\" y2=\"{zero:.2}\" stroke=\"#444\"/>",
        WIDTH - MARGIN
    );
    for (i, (label, v, highlight)) in bars.iter().enumerate() {
        let x = MARGIN + i as f64 * slot + slot * 0.1;
        let y = y_of(v.max(0.0));
        let h = (y_of(v.min(0.0)) - y).max(0.0);
        let fill = if *highlight { "#c0392b" } else { "#5b7db1" };
        let _ = writeln!(
            out,
            "<rect class=\"{class}\" data-label=\"{}\" data-value=\"{v}\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>",
            esc(label),
            slot * 0.8
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"middle\">{}</text>",
            x + slot * 0.4,
            PANEL_H - 12.0,
            esc(label)
        );
    }
    out.push_str("</g>\n");
}

fn render_svg(c: &Collected<'_>) -> String {
    let mut body = String::new();
    let mut top = 0.0;
    for l in &c.layers {
        let bars: Vec<(String, f64, bool)> = l
            .delta_ca
            .iter()
            .enumerate()
            .map(|(k, &v)| (k.to_string(), v, l.sensitive_layers.contains(&k)))
            .collect();
        bar_panel(&mut body, top, "Delta CA by layer", "layer-bar", &bars);
        top += PANEL_H;
    }
    for n in &c.neurons {
        let bars: Vec<(String, f64, bool)> = top_latents(n)
            .into_iter()
            .map(|z| (z.to_string(), n.wfs_cult[z], n.selected.contains(&z)))
            .collect();
        bar_panel(&mut body, top, &format!("WFS by latent ({})", n.culture_label), "latent-bar", &bars);
        top += PANEL_H;
    }
    for s in &c.sweeps {
        let bars: Vec<(String, f64, bool)> =
            s.lambdas.iter().zip(&s.energy).map(|(l, &e)| (format!("{l}"), e, false)).collect();
        bar_panel(&mut body, top, &format!("Energy by lambda ({})", s.culture_label), "sweep-bar", &bars);
        top += PANEL_H;
    }
    for a in &c.ablations {
        let _ = writeln!(body, "<g class=\"ablation\" transform=\"translate(0,{top:.2})\">");
        for (i, (name, value)) in a.rows().iter().enumerate() {
            let _ = writeln!(
                body,
                "<text x=\"{MARGIN:.2}\" y=\"{:.2}\" font-size=\"12\">{}: {}</text>",
                20.0 + 18.0 * i as f64,
                esc(name),
                esc(value)
            );
        }
        body.push_str("</g>\n");
        top += 80.0;
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{:.0}\" viewBox=\"0 0 {WIDTH:.0} {:.0}\">",
        top.max(1.0),
        top.max(1.0)
    );
    out.push_str(&body);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::ablation_report;
    use crate::layer_scan::SelectionRule;

    fn layers_with_peak(peak: usize, n: usize) -> LayerScanResult {
        let delta: Vec<f64> = (0..n).map(|k| if k == peak { 0.5 } else { 0.01 * k as f64 - 0.05 }).collect();
        LayerScanResult {
            ca_cult: delta.iter().map(|d| d + 1.0).collect(),
            ca_noun: vec![1.0; n],
            delta_stderr: vec![0.01; n],
            delta_ca: delta,
            sensitive_layers: vec![peak],
            fallback: false,
            n_pairs: 4,
            rule: SelectionRule::default(),
            noun_surrogate: "bos".into(),
        }
    }

    /// `(label, height)` of every bar with the given class.
    fn bars(svg: &str, class: &str) -> Vec<(String, f64)> {
        svg.lines()
            .filter(|l| l.starts_with(&format!("<rect class=\"{class}\"")))
            .map(|l| {
                let attr = |name: &str| {
                    let start = l.find(&format!(" {name}=\"")).unwrap() + name.len() + 3;
                    l[start..start + l[start..].find('"').unwrap()].to_string()
                };
                (attr("data-label"), attr("height").parse().unwrap())
            })
            .collect()
    }

    #[test]
    fn tallest_bar_sits_at_the_peak_layer() {
        let svg = render(&[ResultFile::Layers(layers_with_peak(16, 24))], Format::Svg).unwrap();
        let b = bars(&svg, "layer-bar");
        assert_eq!(b.len(), 24);
        let best = b.iter().max_by(|x, y| x.1.total_cmp(&y.1)).unwrap();
        assert_eq!(best.0, "16");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(render(&[], Format::Csv), Err(ReportError::NoInputs)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let inputs = [
            ResultFile::Layers(layers_with_peak(3, 8)),
            ResultFile::Ablation(ablation_report(35.62, 7.65, 33.04)),
        ];
        for f in [Format::Csv, Format::Svg, Format::Json] {
            assert_eq!(render(&inputs, f).unwrap(), render(&inputs, f).unwrap());
        }
        let csv = render(&inputs, Format::Csv).unwrap();
        assert!(csv.contains("Masked Top-K Neurons,7.65 (-27.97)\n"));
        assert!(csv.contains("Masked Random Neurons,33.04 (-2.58)\n"));
    }

    #[test]
    fn parses_each_result_kind() {
        let l = layers_with_peak(2, 5);
        let text = serde_json::to_string(&l).unwrap();
        assert_eq!(parse_result("l", &text).unwrap(), ResultFile::Layers(l));
        let a = ablation_report(1.0, 0.5, 0.9);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(parse_result("a", &text).unwrap(), ResultFile::Ablation(a));
        let s = LambdaSweep { culture_label: "x".into(), lambdas: vec![0.0, 1.0], energy: vec![1.0, 2.0] };
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(parse_result("s", &text).unwrap(), ResultFile::Sweep(s));
        assert!(matches!(parse_result("z", "{\"x\": 1}"), Err(ReportError::Unrecognized { .. })));
        assert!(matches!(parse_result("z", "{"), Err(ReportError::Parse { .. })));
    }
}
