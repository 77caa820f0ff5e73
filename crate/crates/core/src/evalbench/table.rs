/// A header plus string rows, rendered either as an aligned text table or
/// as tab-separated values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut s = line(&self.header);
        s.push_str(&(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  ") + "\n"));
        for r in &self.rows {
            s.push_str(&line(r));
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t") + "\n";
        for r in &self.rows {
            s.push_str(&(r.join("\t") + "\n"));
        }
        s
    }

    /// Parses [`Table::to_tsv`] output, checking every row has the header's width.
    pub fn from_tsv(text: &str) -> Option<Table> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next()?.split('\t').map(str::to_string).collect();
        let mut rows = Vec::new();
        for l in lines {
            let r: Vec<String> = l.split('\t').map(str::to_string).collect();
            if r.len() != header.len() {
                return None;
            }
            rows.push(r);
        }
        Some(Table { header, rows })
    }
}
