//! Self-contained SVG emission: accuracy-vs-task curves and the
//! client-by-class partition heatmap. No drawing dependencies; the charts
//! are plain generated markup with fixed margins and a small palette.

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 56.0;
const MR: f64 = 150.0;
const MT: f64 = 36.0;
const MB: f64 = 46.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy curves on a fixed [0, 1] axis; one series per method, one point
/// per completed task.
pub fn accuracy_chart(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let x = |i: usize| {
        if n <= 1 {
            ML + plot_w / 2.0
        } else {
            ML + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| MT + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        ML + plot_w / 2.0,
        esc(title)
    ));
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let yy = y(v);
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{yy:.1}\" x2=\"{:.1}\" y2=\"{yy:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            ML + plot_w,
            ML - 6.0,
            yy + 4.0
        ));
    }
    for i in 0..n {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">after T{}</text>\n",
            x(i),
            MT + plot_h + 18.0,
            i + 1
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MT + plot_h,
        MT + plot_h,
        ML + plot_w,
        MT + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">accuracy</text>\n",
        MT + plot_h / 2.0,
        MT + plot_h / 2.0
    ));
    for (s, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for (i, &v) in values.iter().enumerate() {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                x(i),
                y(v)
            ));
        }
        let ly = MT + 14.0 * s as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            ML + plot_w + 10.0,
            ly,
            ML + plot_w + 24.0,
            ly + 9.0,
            esc(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Count heatmap, rows = clients, columns = classes; shade scales linearly
/// from white at zero to the palette blue at the maximum count.
pub fn heatmap(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<f64>],
) -> String {
    let rows = row_labels.len();
    let cols = col_labels.len();
    let plot_w = W - ML - 30.0;
    let plot_h = H - MT - MB;
    let cw = plot_w / cols.max(1) as f64;
    let ch = plot_h / rows.max(1) as f64;
    let maxv = values
        .iter()
        .flatten()
        .copied()
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        ML + plot_w / 2.0,
        esc(title)
    ));
    for (i, rl) in row_labels.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            MT + ch * i as f64 + ch / 2.0 + 4.0,
            esc(rl)
        ));
        for (j, cl) in col_labels.iter().enumerate() {
            let v = values
                .get(i)
                .and_then(|r| r.get(j))
                .copied()
                .unwrap_or(0.0);
            let t = v / maxv;
            let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
            let (r, g, b) = (lerp(255.0, 31.0), lerp(255.0, 119.0), lerp(255.0, 180.0));
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"rgb({r},{g},{b})\" stroke=\"#ccc\"><title>{}: {} = {v}</title></rect>\n",
                ML + cw * j as f64,
                MT + ch * i as f64,
                cw,
                ch,
                esc(rl),
                esc(cl)
            ));
        }
    }
    // Column labels fit under the grid when the class count is modest;
    // thin out for wide grids so they stay readable.
    let stride = (cols / 24).max(1);
    for (j, cl) in col_labels.iter().enumerate().step_by(stride) {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            ML + cw * j as f64 + cw / 2.0,
            MT + plot_h + 16.0,
            esc(cl)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_polyline_and_point_set_per_series() {
        let svg = accuracy_chart(
            "demo",
            &[
                ("ecoral".into(), vec![0.9, 0.8, 0.7]),
                ("replay".into(), vec![0.8, 0.6, 0.5]),
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains("after T3"));
        assert!(svg.contains("ecoral"));
    }

    #[test]
    fn heatmap_emits_rows_times_cols_cells() {
        let svg = heatmap(
            "partition",
            &["client-0".into(), "client-1".into()],
            &["c0".into(), "c1".into(), "c2".into()],
            &[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 1.0]],
        );
        assert_eq!(svg.matches("<rect").count() - 1, 6, "background + cells");
        assert!(svg.contains("client-1"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = accuracy_chart("a<b & c", &[("m&m".into(), vec![0.5])]);
        assert!(svg.contains("a&lt;b &amp; c"));
        assert!(!svg.contains("a<b"));
    }
}
