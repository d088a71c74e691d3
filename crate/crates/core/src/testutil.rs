use crate::pckg::Pckg;
use crate::toy::{graph_from_ranges, Ranges};

pub(crate) fn graph_from(rows: &[Ranges<'_>]) -> Pckg {
    graph_from_ranges(rows).expect("valid test graph")
}
