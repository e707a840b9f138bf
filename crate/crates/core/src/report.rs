//! Static HTML/SVG rendering of importance, fidelity, alignment and
//! attribution results.
//!
//! Output is a pure function of the inputs: no timestamps, fixed number
//! formatting, and a fixed palette indexed by concept id so a concept keeps
//! its color across every page.

use std::fmt::Write as _;

use html_escape::encode_text;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentResult;
use crate::fidelity::{CurveKind, FidelityCurve, OrderingComparison};
use crate::occlusion::AttributionBundle;
use crate::sobol::ImportanceReport;

const PALETTE: [(u8, u8, u8); 12] = [
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
    (188, 189, 34),
    (23, 190, 207),
    (57, 59, 121),
    (173, 73, 74),
];

pub fn concept_rgb(concept: usize) -> (u8, u8, u8) {
    PALETTE[concept % PALETTE.len()]
}

pub fn concept_color(concept: usize) -> String {
    let (r, g, b) = concept_rgb(concept);
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Representative excerpts for one concept, shown next to the charts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptExamples {
    pub concept: usize,
    pub excerpts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub title: String,
    pub class_name: Option<String>,
    pub importance: Option<ImportanceReport>,
    pub fidelity: Option<OrderingComparison>,
    pub alignment: Vec<AlignmentResult>,
    pub bundles: Vec<AttributionBundle>,
    pub examples: Vec<ConceptExamples>,
}

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 260.0;
const MARGIN: f64 = 40.0;

/// Horizontal-axis bar chart of clipped total indices, in ranking order.
pub fn importance_chart(report: &ImportanceReport) -> String {
    let mut svg = String::new();
    let n = report.indices.len().max(1);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let max = report.indices.iter().map(|c| c.s_total).fold(0.0, f64::max).max(1e-12);
    let slot = plot_w / n as f64;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" class="importance" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{y}" x2="{x2}" y2="{y}" stroke="#333"/>"##,
        y = HEIGHT - MARGIN,
        x2 = WIDTH - MARGIN
    );
    for (slot_i, &k) in report.ranking.iter().enumerate() {
        let value = report.indices[k].s_total;
        let h = plot_h * value / max;
        let x = MARGIN + slot_i as f64 * slot + 0.15 * slot;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{color}"><title>concept {k}: {value:.4}</title></rect>"#,
            y = HEIGHT - MARGIN - h,
            w = 0.7 * slot,
            color = concept_color(k),
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{ty:.2}" font-size="11" text-anchor="middle">c{k}</text>"#,
            cx = x + 0.35 * slot,
            ty = HEIGHT - MARGIN + 14.0,
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{ty:.2}" font-size="10" text-anchor="middle">{value:.3}</text>"#,
            cx = x + 0.35 * slot,
            ty = HEIGHT - MARGIN - h - 4.0,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn ordering_style(curve: &FidelityCurve) -> (&'static str, &'static str, f64) {
    match curve.ordering {
        crate::fidelity::Ordering::Importance => ("#d62728", "none", 2.5),
        crate::fidelity::Ordering::Reverse => ("#1f77b4", "none", 2.0),
        crate::fidelity::Ordering::Random(_) => ("#7f7f7f", "4 3", 1.0),
    }
}

/// Line plot of every curve of one kind; x is the number of concepts
/// removed or added.
pub fn fidelity_chart(curves: &[FidelityCurve], kind: CurveKind) -> String {
    let selected: Vec<&FidelityCurve> = curves.iter().filter(|c| c.kind == kind).collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" class="fidelity {kind}" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let scores = selected.iter().flat_map(|c| c.points.iter().map(|p| p.1));
    let (lo, hi) = scores.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let r = selected.first().map_or(1, |c| c.points.len().saturating_sub(1)).max(1);
    let sx = |t: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / r as f64;
    let sy = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let _ = writeln!(
        svg,
        r##"<path d="M{MARGIN} {top} V{bottom} H{right}" fill="none" stroke="#333"/>"##,
        top = MARGIN,
        bottom = HEIGHT - MARGIN,
        right = WIDTH - MARGIN
    );
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{y:.2}" font-size="10">{hi:.3}</text>"#, y = MARGIN - 6.0);
    let _ = writeln!(svg, r#"<text x="4" y="{y:.2}" font-size="10">{lo:.3}</text>"#, y = HEIGHT - MARGIN);
    // Random orderings first so the importance and reverse curves draw on top.
    let mut ordered = selected.clone();
    ordered.sort_by_key(|c| !matches!(c.ordering, crate::fidelity::Ordering::Random(_)));
    for c in ordered {
        let (color, dash, width) = ordering_style(c);
        let points: Vec<String> = c.points.iter().map(|&(t, v)| format!("{:.2},{:.2}", sx(t), sy(v))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-dasharray="{dash}"><title>{} (AUC {:.4})</title></polyline>"#,
            points.join(" "),
            c.ordering,
            c.auc,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Excerpt text with each element tinted by its winning concept; alpha is
/// the element's intensity.
pub fn render_bundle(bundle: &AttributionBundle) -> String {
    let mut html = String::new();
    let _ = write!(html, r#"<div class="excerpt" data-id="{}">"#, encode_text(&bundle.excerpt));
    if bundle.unattributed {
        let _ = write!(
            html,
            r#"<span class="unattributed">{}</span> <em class="note">(unattributed)</em>"#,
            encode_text(&bundle.text)
        );
    } else {
        let chars: Vec<char> = bundle.text.chars().collect();
        let mut cursor = 0usize;
        for e in &bundle.elements {
            let (start, end) = (e.span.0.saturating_sub(bundle.span.0), e.span.1.saturating_sub(bundle.span.0));
            if start > cursor {
                let gap: String = chars[cursor..start.min(chars.len())].iter().collect();
                html.push_str(&encode_text(&gap));
            }
            let (r, g, b) = concept_rgb(e.concept.unwrap_or(0));
            let alpha = if e.concept.is_some() { e.intensity } else { 0.0 };
            let _ = write!(
                html,
                r#"<span class="element" style="background-color: rgba({r}, {g}, {b}, {alpha:.3})" title="concept {} φ={:.4}">{}</span>"#,
                e.concept.map_or("-".to_string(), |k| k.to_string()),
                e.phi,
                encode_text(&e.text),
            );
            cursor = end.min(chars.len());
        }
        if cursor < chars.len() {
            let tail: String = chars[cursor..].iter().collect();
            html.push_str(&encode_text(&tail));
        }
    }
    html.push_str("</div>\n");
    html
}

fn render_alignment(results: &[AlignmentResult]) -> String {
    let mut html = String::from(
        "<table class=\"alignment\">\n<tr><th>aspect</th><th>best concept</th><th>P</th><th>R</th><th>F1</th></tr>\n",
    );
    for r in results {
        let _ = writeln!(
            html,
            r#"<tr><td>{}</td><td style="color: {}">c{}</td><td>{:.3}</td><td>{:.3}</td><td>{:.3}</td></tr>"#,
            encode_text(&r.aspect),
            concept_color(r.best_concept),
            r.best_concept,
            r.precision,
            r.recall,
            r.f1
        );
    }
    html.push_str("</table>\n<p class=\"note\">Best concepts are selected on the full annotated set.</p>\n");
    html
}

fn legend(concepts: impl Iterator<Item = usize>) -> String {
    let mut html = String::from("<div class=\"legend\">");
    for k in concepts {
        let _ = write!(html, r#"<span class="swatch" style="background-color: {}">c{k}</span> "#, concept_color(k));
    }
    html.push_str("</div>\n");
    html
}

/// Complete standalone page. Every section is optional; with no inputs the
/// page still renders with empty-state notes.
pub fn render_html(inputs: &ReportInputs) -> String {
    let title = if inputs.title.is_empty() { "Concept report" } else { &inputs.title };
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n<style>\n\
         body {{ font-family: sans-serif; max-width: 960px; margin: 2em auto; color: #222; }}\n\
         .excerpt {{ margin: 0.4em 0; line-height: 1.6; }}\n\
         .element {{ border-radius: 3px; padding: 0 1px; }}\n\
         .swatch {{ color: #fff; padding: 0 6px; border-radius: 3px; }}\n\
         .note {{ color: #777; font-size: 0.9em; }}\n\
         table {{ border-collapse: collapse; }} td, th {{ border: 1px solid #ccc; padding: 2px 8px; }}\n\
         </style>\n</head>\n<body>\n<h1>{t}</h1>\n",
        t = encode_text(title)
    );
    if let Some(class) = &inputs.class_name {
        let _ = writeln!(html, "<p>Class under explanation: <strong>{}</strong></p>", encode_text(class));
    }

    html.push_str("<h2>Concept importance</h2>\n");
    match &inputs.importance {
        Some(report) => {
            let _ = writeln!(
                html,
                "<p class=\"note\">Total indices, N = {}, mask law {}, output variance {:.4}{}</p>",
                report.n,
                report.mask_law,
                report.variance,
                if report.degenerate { " (degenerate: constant output)" } else { "" }
            );
            html.push_str(&importance_chart(report));
            html.push_str(&legend(report.ranking.iter().copied()));
        }
        None => html.push_str("<p class=\"note\">No importance report.</p>\n"),
    }

    if !inputs.examples.is_empty() {
        html.push_str("<h2>Concept examples</h2>\n");
        for ex in &inputs.examples {
            let _ = writeln!(html, r#"<h3 style="color: {}">Concept {}</h3>"#, concept_color(ex.concept), ex.concept);
            html.push_str("<ul>\n");
            for text in &ex.excerpts {
                let _ = writeln!(html, "<li>{}</li>", encode_text(text));
            }
            html.push_str("</ul>\n");
        }
    }

    html.push_str("<h2>Fidelity</h2>\n");
    match &inputs.fidelity {
        Some(cmp) => {
            for (kind, summary, better) in [
                (CurveKind::Deletion, &cmp.deletion, "lower is better"),
                (CurveKind::Insertion, &cmp.insertion, "higher is better"),
            ] {
                let _ = writeln!(
                    html,
                    "<h3>{kind} ({better})</h3>\n<p class=\"note\">AUC importance {:.4}, random {:.4} ± {:.4}, reverse {:.4}</p>",
                    summary.importance, summary.random_mean, summary.random_std, summary.reverse
                );
                html.push_str(&fidelity_chart(&cmp.curves, kind));
            }
        }
        None => html.push_str("<p class=\"note\">No fidelity curves.</p>\n"),
    }

    if !inputs.alignment.is_empty() {
        html.push_str("<h2>Aspect alignment</h2>\n");
        html.push_str(&render_alignment(&inputs.alignment));
    }

    html.push_str("<h2>Explanations</h2>\n");
    if inputs.bundles.is_empty() {
        html.push_str("<p class=\"note\">No explained excerpts.</p>\n");
    } else {
        for b in &inputs.bundles {
            html.push_str(&render_bundle(b));
        }
    }
    html.push_str("</body>\n</html>\n");
    html
}
