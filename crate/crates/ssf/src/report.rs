//! Metric report rendering: a machine-readable CSV and an aligned text
//! table for stdout. Both are deterministic for a given report.

use ssf_core::metrics::{Cell, MetricsReport, RangeBin};

fn bin_label(bin: &RangeBin) -> String {
    match bin.upper_m {
        Some(hi) => format!("{}-{}", bin.lower_m, hi),
        None => format!("{}-inf", bin.lower_m),
    }
}

fn push_cell(rows: &mut Vec<[String; 5]>, metric: &str, class: &str, bin: &str, cell: &Option<Cell>) {
    if let Some(c) = cell {
        rows.push([metric.into(), class.into(), bin.into(), format!("{}", c.value), c.count.to_string()]);
    }
}

fn push_value(rows: &mut Vec<[String; 5]>, metric: &str, value: Option<f64>) {
    if let Some(v) = value {
        rows.push([metric.into(), String::new(), String::new(), format!("{v}"), String::new()]);
    }
}

/// Flatten a report into `metric,class,bin,value,count` rows. Empty
/// subsets simply produce no row.
pub fn report_rows(report: &MetricsReport) -> Vec<[String; 5]> {
    let mut rows = Vec::new();
    push_cell(&mut rows, "threeway_fd", "", "", &report.threeway.fd);
    push_cell(&mut rows, "threeway_fs", "", "", &report.threeway.fs);
    push_cell(&mut rows, "threeway_bs", "", "", &report.threeway.bs);
    push_value(&mut rows, "threeway_mean", report.threeway.mean);

    for c in &report.bucket.static_cells {
        rows.push([
            "bucket_epe".into(),
            c.class_id.to_string(),
            c.bucket.to_string(),
            format!("{}", c.epe),
            c.count.to_string(),
        ]);
    }
    for c in &report.bucket.cells {
        rows.push([
            "bucket_epe".into(),
            c.class_id.to_string(),
            c.bucket.to_string(),
            format!("{}", c.epe),
            c.count.to_string(),
        ]);
        rows.push([
            "bucket_normalized".into(),
            c.class_id.to_string(),
            c.bucket.to_string(),
            format!("{}", c.epe / c.mean_speed_mps),
            c.count.to_string(),
        ]);
    }
    push_value(&mut rows, "bucket_static_mean", report.bucket.static_mean);
    push_value(&mut rows, "bucket_dynamic_normalized_mean", report.bucket.dynamic_normalized_mean);

    for bin in &report.rangewise.bins {
        let label = bin_label(bin);
        push_cell(&mut rows, "range_dynamic", "", &label, &bin.dynamic);
        push_cell(&mut rows, "range_static", "", &label, &bin.stat);
    }
    push_value(&mut rows, "range_dynamic_mean", report.rangewise.dynamic_mean);
    push_value(&mut rows, "range_static_mean", report.rangewise.static_mean);
    rows
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,class,bin,value,count\n");
    for row in report_rows(report) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn report_table(report: &MetricsReport) -> String {
    let rows = report_rows(report);
    let header = ["metric", "class", "bin", "value", "count"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: [&str; 5], out: &mut String| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            out.extend(std::iter::repeat(' ').take(w - cell.len()));
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    fmt_row(header, &mut out);
    fmt_row(["------", "-----", "---", "-----", "-----"], &mut out);
    for row in &rows {
        fmt_row([&row[0], &row[1], &row[2], &row[3], &row[4]], &mut out);
    }
    out
}
