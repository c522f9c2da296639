use std::fmt::Write;

use super::DesignPoint;

/// Aligned plain-text table of design points.
pub fn format_design_table(points: &[DesignPoint]) -> String {
    let header = [
        "rank",
        "L",
        "K",
        "params",
        "bound",
        "balance",
        "flops/pos",
        "density",
    ];
    let rows: Vec<[String; 8]> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let widths = p
                .branch_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let density = match &p.density {
                Some(r) if r.exactly_one_path => "one-path".to_string(),
                Some(r) => format!("{:.3}", r.covered_fraction),
                None => "-".to_string(),
            };
            [
                (i + 1).to_string(),
                p.depth.to_string(),
                format!("({widths})"),
                p.params.to_string(),
                format!("{:.1}", p.lower_bound),
                format!("{:.3}", p.balance_score),
                p.flops_per_position.to_string(),
                density,
            ]
        })
        .collect();

    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
    };
    line(&header);
    for row in &rows {
        line(&row.each_ref().map(String::as_str));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permutation::Regime;
    use crate::planner::enumerate_factorizations;

    #[test]
    fn columns_line_up() {
        let points = enumerate_factorizations(16, 3, Regime::Separated, 9);
        let table = format_design_table(&points);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), points.len() + 1);
        assert!(lines[0].contains("params"));
        assert!(lines[1].contains("(1,4,4)"));
        let widths: Vec<usize> = lines.iter().map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }
}
