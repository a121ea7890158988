use std::fs;
use std::path::{Path, PathBuf};

use csv::{QuoteStyle, Terminator, WriterBuilder};

/// 17 significant digits, round-trip exact.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = WriterBuilder::new()
            .terminator(Terminator::CRLF)
            .quote_style(QuoteStyle::Necessary)
            .from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()
    }
}

pub fn indexed(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn table(&self, name: &str, table: &Table) -> std::io::Result<PathBuf> {
        let p = self.path(name);
        table.write(&p)?;
        Ok(p)
    }

    pub fn text(&self, name: &str, text: &str) -> std::io::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    pub fn sub(&self, name: &str) -> std::io::Result<OutDir> {
        OutDir::create(&self.root.join(name))
    }
}

/// Gnuplot script plotting columns `cols` of `csv` against the first column.
pub fn gnuplot(csv: &str, title: &str, ylabel: &str, cols: &[(usize, String)], logscale: bool) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str(&format!("set title '{title}'\n"));
    s.push_str("set xlabel 't [s]'\n");
    s.push_str(&format!("set ylabel '{ylabel}'\n"));
    s.push_str("set grid\n");
    if logscale {
        s.push_str("set logscale y\n");
    }
    let plots: Vec<String> = cols.iter().map(|(c, name)| format!("'{csv}' using 1:{c} with lines title '{name}'")).collect();
    s.push_str("plot ");
    s.push_str(&plots.join(", \\\n     "));
    s.push('\n');
    s
}
