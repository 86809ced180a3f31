//! Result table and CSV/PNG report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::types::Image;

use super::dataset::save_png;
use super::HarnessError;

pub const RESULTS_HEADER: &str =
    "split,image_id,attack,epsilon,lambda,defense,miou_clean,miou_adv,miou_def,Q,wallclock_ms";

/// One per-image measurement at a given (attack, epsilon, defense).
#[derive(Clone, Debug)]
pub struct Row {
    pub split: String,
    pub image_id: String,
    pub attack: String,
    pub epsilon: f64,
    pub lambda: f64,
    pub defense: String,
    pub miou_clean: f64,
    pub miou_adv: f64,
    pub miou_def: Option<f64>,
    pub q: Option<f64>,
    pub wallclock_ms: u64,
}

/// Split-level mIoU computed from merged confusion matrices (the single
/// source of truth for aggregate numbers).
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub attack: String,
    pub epsilon: f64,
    pub defense: String,
    pub miou_clean: f64,
    pub miou_adv: f64,
    pub miou_def: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ResultTable {
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    /// Palette-rendered mask panels: (file stem, image).
    pub panels: Vec<(String, Image)>,
}

impl ResultTable {
    pub fn aggregate(&self, epsilon: f64, defense: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.epsilon == epsilon && a.defense == defense)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn results_csv(table: &ResultTable) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{}\n",
            r.split,
            r.image_id,
            r.attack,
            r.epsilon,
            r.lambda,
            r.defense,
            r.miou_clean,
            r.miou_adv,
            fmt_opt(r.miou_def),
            fmt_opt(r.q),
            r.wallclock_ms
        ));
    }
    out
}

pub fn summary_csv(table: &ResultTable) -> String {
    // group rows by (attack, epsilon, defense) preserving first-seen order
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&Row>> = BTreeMap::new();
    for r in &table.rows {
        let key = (r.attack.clone(), format!("{}", r.epsilon), r.defense.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = String::from(
        "attack,epsilon,lambda,defense,miou_clean,miou_adv,miou_def,Q,wallclock_ms\n",
    );
    for key in order {
        let rows = &groups[&key];
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&Row) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let mean_opt = |f: &dyn Fn(&Row) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            if vals.len() == rows.len() {
                Some(vals.iter().sum::<f64>() / n)
            } else {
                None
            }
        };
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{},{},{:.3}\n",
            key.0,
            key.1,
            mean(&|r| r.lambda),
            key.2,
            mean(&|r| r.miou_clean),
            mean(&|r| r.miou_adv),
            fmt_opt(mean_opt(&|r| r.miou_def)),
            fmt_opt(mean_opt(&|r| r.q)),
            mean(&|r| r.wallclock_ms as f64)
        ));
    }
    out
}

/// Write results.csv, summary.csv, and the palette-rendered mask panels.
pub fn emit_report(table: &ResultTable, dir: &Path) -> Result<(), HarnessError> {
    if table.rows.is_empty() {
        return Err(HarnessError::Data("empty result table".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(table))?;
    fs::write(dir.join("summary.csv"), summary_csv(table))?;
    if !table.panels.is_empty() {
        let panel_dir = dir.join("panels");
        fs::create_dir_all(&panel_dir)?;
        for (stem, img) in &table.panels {
            save_png(img, &panel_dir.join(format!("{stem}.png")))?;
        }
    }
    Ok(())
}

/// Horizontally concatenate images of equal height with a white separator.
pub fn concat_panels(images: &[&Image], gap: usize) -> Image {
    assert!(!images.is_empty());
    let h = images[0].height;
    let c = images[0].channels;
    let total_w: usize =
        images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
    let mut data = vec![255u8; h * total_w * c];
    let mut x_off = 0usize;
    for img in images {
        assert_eq!(img.height, h);
        for y in 0..h {
            let dst = (y * total_w + x_off) * c;
            let src = y * img.width * c;
            data[dst..dst + img.width * c]
                .copy_from_slice(&img.data()[src..src + img.width * c]);
        }
        x_off += img.width + gap;
    }
    Image::new(h, total_w, c, data)
}
