//! Token-by-expert routing-weight export: a dense numeric grid (.txt) plus
//! a self-contained SVG rendering (.svg), for inspecting which experts a
//! layer's router picks for each position of one input.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use crate::backbone::DualEncoder;
use crate::error::{Error, Result};
use crate::tensor::Tape;

/// The single input to route: a raw caption (token ids) or a raw image
/// (row-major pixels).
#[derive(Debug, Clone, PartialEq)]
pub enum HeatmapInput {
    TextTokens(Vec<usize>),
    ImagePixels(Vec<f64>),
}

/// Dense routing weights for one sequence at one hooked layer. Each row is
/// a token's full weight vector: the selected experts carry the renormalized
/// softmax weights, everything else is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapData {
    /// Hooked-layer position the grid came from.
    pub layer: usize,
    pub n_experts: usize,
    /// `weights[t][e]`, rows summing to 1 with at most `top_k` nonzeros.
    pub weights: Vec<Vec<f64>>,
    pub txt_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Route one input through the model and export the chosen layer's weight
/// grid as `<out_base>.txt` and `<out_base>.svg`. `layer` indexes the
/// hooked layers (`None` = the last one, where routing is most
/// specialized).
pub fn export_expert_heatmap(
    model: &DualEncoder,
    input: &HeatmapInput,
    layer: Option<usize>,
    out_base: &Path,
) -> Result<HeatmapData> {
    let cfg = model.moa_cfg.as_ref().ok_or(Error::InvalidArgument {
        op: "export_expert_heatmap",
        msg: "model has no adapter mixture, so there is no routing to plot".into(),
    })?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false)?;
    let out = match input {
        HeatmapInput::TextTokens(ids) => model.encode_text(&mut tape, &binding, ids)?,
        HeatmapInput::ImagePixels(px) => model.encode_image(&mut tape, &binding, px)?,
    };
    if out.routing.is_empty() {
        return Err(Error::Contract(
            "mixture-bearing model produced no routing outcomes".into(),
        ));
    }
    let chosen = match layer {
        Some(l) if l >= out.routing.len() => {
            return Err(Error::InvalidArgument {
                op: "export_expert_heatmap",
                msg: format!(
                    "layer {l} out of range: model hooks {} layers",
                    out.routing.len()
                ),
            })
        }
        Some(l) => l,
        None => out.routing.len() - 1,
    };
    let outcome = &out.routing[chosen];
    let n = cfg.n_experts;
    let mut weights = Vec::with_capacity(outcome.weights.len());
    for row in &outcome.weights {
        let sum: f64 = row.iter().sum();
        let nonzero = row.iter().filter(|&&v| v != 0.0).count();
        if row.len() != n || (sum - 1.0).abs() > 1e-6 || nonzero > cfg.top_k {
            return Err(Error::Contract(format!(
                "routing row sums to {sum} with {nonzero} nonzeros (limit {})",
                cfg.top_k
            )));
        }
        weights.push(row.clone());
    }

    let txt_path = out_base.with_extension("txt");
    let svg_path = out_base.with_extension("svg");
    if let Some(parent) = out_base.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_txt(&txt_path, &weights)?;
    write_svg(&svg_path, &weights, n)?;
    Ok(HeatmapData {
        layer: chosen,
        n_experts: n,
        weights,
        txt_path,
        svg_path,
    })
}

/// Plain numeric grid: one line per token, one column per expert,
/// space-separated, full f64 round-trip precision.
fn write_txt(path: &Path, weights: &[Vec<f64>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for row in weights {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

/// Minimal standalone SVG: one shaded cell per (token, expert), white for
/// weight 0 through dark blue for weight 1, with index labels.
fn write_svg(path: &Path, weights: &[Vec<f64>], n_experts: usize) -> Result<()> {
    const CELL: usize = 24;
    const MARGIN: usize = 36;
    let rows = weights.len();
    let width = MARGIN + n_experts * CELL + 8;
    let height = MARGIN + rows * CELL + 8;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"14\" font-family=\"monospace\" font-size=\"11\">\
expert →</text>\n"
    ));
    svg.push_str(
        "<text x=\"4\" y=\"30\" font-family=\"monospace\" font-size=\"11\">token ↓</text>\n",
    );
    for (t, row) in weights.iter().enumerate() {
        for (e, &w) in row.iter().enumerate() {
            // Linear white→blue ramp.
            let shade = (255.0 * (1.0 - w.clamp(0.0, 1.0))) as u8;
            let x = MARGIN + e * CELL;
            let y = MARGIN + t * CELL;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\" stroke-width=\"1\"><title>\
token {t}, expert {e}: {w}</title></rect>\n"
            ));
        }
    }
    for e in 0..n_experts {
        let x = MARGIN + e * CELL + CELL / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
text-anchor=\"middle\">{e}</text>\n",
            MARGIN - 6
        ));
    }
    for t in 0..rows {
        let y = MARGIN + t * CELL + CELL / 2 + 4;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-family=\"monospace\" font-size=\"10\" \
text-anchor=\"end\">{t}</text>\n",
            MARGIN - 6
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
