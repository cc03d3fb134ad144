use std::fmt::Write as _;

/// Ordered `metric → value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (n, v) in &self.entries {
            writeln!(out, "{n},{v}").unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<w$}  value\n", "metric");
        for (n, v) in &self.entries {
            writeln!(out, "{n:<w$}  {v:.6}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = MetricsReport::default();
        r.push("auroc", 0.75);
        r.push("f1", 0.5);
        assert_eq!(r.to_csv(), "metric,value\nauroc,0.75\nf1,0.5\n");
        assert_eq!(r.get("f1"), Some(0.5));
        assert!(r.to_table().contains("auroc"));
    }
}
