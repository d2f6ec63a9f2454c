//! Text form of [`EvalReport`] and a CSV dump for plotting.
//!
//! Tab-separated, one record per line:
//!
//! ```text
//! divdec-eval-report  1
//! probe               verbatim|cloze
//! rescale             <forget bool>  <utility bool>
//! best                <label>|-
//! target|retrain|point|original  <label> <probe> <forget> <utility> <clip>
//! ```
//!
//! Floats are written with 17 significant digits so they read back
//! bit-exactly.

use std::io::{BufRead, Write};

use super::{EvalError, EvalReport, MetricPoint, ProbeKind};

pub const REPORT_HEADER: &str = "divdec-eval-report";
const REPORT_VERSION: &str = "1";

fn write_point<W: Write>(w: &mut W, kind: &str, p: &MetricPoint) -> std::io::Result<()> {
    writeln!(
        w,
        "{kind}\t{}\t{}\t{:.16e}\t{:.16e}\t{}",
        p.config_label,
        p.probe_kind.as_str(),
        p.forget_metric,
        p.utility_metric,
        p.clip_count
    )
}

pub fn write_report<W: Write>(mut w: W, report: &EvalReport) -> Result<(), EvalError> {
    writeln!(w, "{REPORT_HEADER}\t{REPORT_VERSION}")?;
    writeln!(w, "probe\t{}", report.probe.as_str())?;
    writeln!(w, "rescale\t{}\t{}", report.rescale_forget, report.rescale_utility)?;
    writeln!(w, "best\t{}", report.best.as_deref().unwrap_or("-"))?;
    write_point(&mut w, "target", &report.target)?;
    write_point(&mut w, "retrain", &report.retrain)?;
    for p in &report.points {
        write_point(&mut w, "point", p)?;
    }
    for p in &report.original {
        write_point(&mut w, "original", p)?;
    }
    Ok(())
}

fn parse_point(fields: &[&str], line: usize) -> Result<MetricPoint, EvalError> {
    let err = |message: String| EvalError::Report { line, message };
    if fields.len() != 6 {
        return Err(err(format!("expected 6 fields, found {}", fields.len())));
    }
    let float = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
    Ok(MetricPoint {
        config_label: fields[1].to_owned(),
        probe_kind: fields[2].parse().map_err(err)?,
        forget_metric: float(fields[3])?,
        utility_metric: float(fields[4])?,
        clip_count: fields[5].parse().map_err(|e| err(format!("{:?}: {e}", fields[5])))?,
    })
}

pub fn read_report<R: BufRead>(reader: R) -> Result<EvalReport, EvalError> {
    let mut probe = None;
    let mut rescale = None;
    let mut best = None;
    let (mut target, mut retrain) = (None, None);
    let (mut points, mut original) = (Vec::new(), Vec::new());
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let err = |message: &str| EvalError::Report { line: n, message: message.to_owned() };
        let fields: Vec<&str> = line.split('\t').collect();
        if !saw_header {
            if fields != [REPORT_HEADER, REPORT_VERSION] {
                return Err(err("missing or unsupported header"));
            }
            saw_header = true;
            continue;
        }
        match fields[0] {
            "probe" if fields.len() == 2 => probe = Some(fields[1].parse::<ProbeKind>().map_err(|e| err(&e))?),
            "rescale" if fields.len() == 3 => {
                let b = |s: &str| s.parse::<bool>().map_err(|_| err("rescale flags must be true or false"));
                rescale = Some((b(fields[1])?, b(fields[2])?));
            }
            "best" if fields.len() == 2 => best = Some((fields[1] != "-").then(|| fields[1].to_owned())),
            "target" => target = Some(parse_point(&fields, n)?),
            "retrain" => retrain = Some(parse_point(&fields, n)?),
            "point" => points.push(parse_point(&fields, n)?),
            "original" => original.push(parse_point(&fields, n)?),
            "" if line.is_empty() => {}
            _ => return Err(err("unrecognized record")),
        }
    }
    let missing = |what: &str| EvalError::Report { line: 0, message: format!("missing {what}") };
    if !saw_header {
        return Err(missing("header"));
    }
    let (rescale_forget, rescale_utility) = rescale.ok_or_else(|| missing("rescale"))?;
    Ok(EvalReport {
        probe: probe.ok_or_else(|| missing("probe"))?,
        points,
        target: target.ok_or_else(|| missing("target"))?,
        retrain: retrain.ok_or_else(|| missing("retrain"))?,
        rescale_forget,
        rescale_utility,
        best: best.ok_or_else(|| missing("best"))?,
        original,
    })
}

/// Forget-vs-utility scatter data with target and retrain markers.
pub fn write_plot_csv<W: Write>(w: W, report: &EvalReport) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["kind", "label", "probe", "forget", "utility", "clip_count", "distance", "selected"])?;
    let rows = std::iter::once(("target", &report.target))
        .chain(std::iter::once(("retrain", &report.retrain)))
        .chain(report.points.iter().map(|p| ("point", p)))
        .chain(report.original.iter().map(|p| ("original", p)));
    for (kind, p) in rows {
        let selected = kind == "point" && report.best.as_deref() == Some(p.config_label.as_str());
        out.write_record([
            kind,
            &p.config_label,
            p.probe_kind.as_str(),
            &format!("{:.16e}", p.forget_metric),
            &format!("{:.16e}", p.utility_metric),
            &p.clip_count.to_string(),
            &format!("{:.16e}", report.distance_to_retrain(p)),
            if selected { "1" } else { "0" },
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{RETRAIN_LABEL, TARGET_LABEL};

    fn sample() -> EvalReport {
        let p = |label: &str, f: f64, u: f64, c: u64| MetricPoint {
            config_label: label.into(),
            probe_kind: ProbeKind::Cloze,
            forget_metric: f,
            utility_metric: u,
            clip_count: c,
        };
        EvalReport {
            probe: ProbeKind::Cloze,
            points: vec![p("linear:alpha=5", 0.1, 12.345678901234567, 0), p("rank:k=1", 1.0 / 3.0, 11.0, 4)],
            target: p(TARGET_LABEL, 0.95, 10.0, 0),
            retrain: p(RETRAIN_LABEL, 0.0, 10.5, 0),
            rescale_forget: true,
            rescale_utility: false,
            best: Some("rank:k=1".into()),
            original: vec![p("rank:k=1", 0.025, 11.0, 4)],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let r = sample();
        let mut buf = Vec::new();
        write_report(&mut buf, &r).unwrap();
        let back = read_report(buf.as_slice()).unwrap();
        assert_eq!(back, r);
        let mut again = Vec::new();
        write_report(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn no_selection_round_trips() {
        let r = EvalReport { best: None, ..sample() };
        let mut buf = Vec::new();
        write_report(&mut buf, &r).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("best\t-\n"));
        assert_eq!(read_report(buf.as_slice()).unwrap(), r);
    }

    #[test]
    fn malformed_reports() {
        assert!(matches!(read_report(&b"nope\n"[..]), Err(EvalError::Report { line: 1, .. })));
        assert!(matches!(read_report(&b""[..]), Err(EvalError::Report { .. })));
        let mut buf = Vec::new();
        write_report(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("rank:k=1\tcloze\t", "rank:k=1\tcloze\tx");
        assert!(matches!(read_report(text.as_bytes()), Err(EvalError::Report { .. })));
    }

    #[test]
    fn plot_csv_has_every_point() {
        let mut buf = Vec::new();
        write_plot_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 2 + 1);
        assert!(lines[4].starts_with("point,rank:k=1,cloze,") && lines[4].ends_with(",1"));
    }
}
