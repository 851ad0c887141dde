use std::fmt::Write as _;
use std::path::Path;

use sar_core::inference::BenchReport;
use sar_core::masks::{render_ascii, GeneralizedCausalMasks};
use sar_core::synthdata::TokenGrid;

use crate::config::CliResult;

/// Plain (P2) greymap of token ids, grids stacked top to bottom.
pub fn pgm(grids: &[TokenGrid], vocab: usize) -> String {
    let Some(first) = grids.first() else {
        return "P2\n0 0\n1\n".into();
    };
    let (h, w) = (first.shape.height, first.shape.width);
    let mut s = format!("P2\n{} {}\n{}\n", w, h * grids.len(), vocab.saturating_sub(1).max(1));
    for g in grids {
        for row in g.tokens.chunks(w) {
            let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    s
}

pub const MASK_FILES: [&str; 3] = ["m_e.csv", "m_ds.csv", "m_dc.csv"];

/// ASCII grids followed by one CSV block per mask.
pub fn masks_text(masks: &GeneralizedCausalMasks) -> String {
    let mut s = render_ascii(masks);
    for (name, m) in MASK_FILES.iter().zip([&masks.encoder, &masks.decoder_self, &masks.decoder_cross]) {
        let _ = writeln!(s, "\n# {name}");
        s.push_str(&m.to_csv());
    }
    s
}

pub fn write_mask_files(masks: &GeneralizedCausalMasks, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    for (name, m) in MASK_FILES.iter().zip([&masks.encoder, &masks.decoder_self, &masks.decoder_cross]) {
        std::fs::write(dir.join(name), m.to_csv())?;
    }
    std::fs::write(dir.join("masks.txt"), render_ascii(masks))?;
    Ok(())
}

/// One row per decoding step plus a `total` row; wall time appears only on
/// the total row.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut s = String::from("n,sets,cache,set,set_size,encoder_self,decoder_self,decoder_cross,attention_ops,wall_time_s\n");
    let cache = if report.use_cache { "on" } else { "off" };
    for (k, (c, size)) in report.per_set.iter().zip(&report.set_sizes).enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},",
            report.n,
            report.sets,
            cache,
            k + 1,
            size,
            c.encoder_self,
            c.decoder_self,
            c.decoder_cross,
            c.total()
        );
    }
    let o = &report.ops;
    let _ = writeln!(
        s,
        "{},{},{},total,{},{},{},{},{},{:.6}",
        report.n,
        report.sets,
        cache,
        report.n,
        o.encoder_self,
        o.decoder_self,
        o.decoder_cross,
        report.attention_ops,
        report.wall_time_s
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use sar_core::schedule::GridShape;

    #[test]
    fn pgm_layout() {
        let g = TokenGrid::new(GridShape::new(2, 3).unwrap(), vec![0, 1, 2, 3, 4, 5], 0).unwrap();
        assert_eq!(pgm(&[g.clone(), g], 8), "P2\n3 4\n7\n0 1 2\n3 4 5\n0 1 2\n3 4 5\n");
    }
}
