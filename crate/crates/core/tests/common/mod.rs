#![allow(dead_code)]

use ptdf_admm::case::{self, Branch, Bus, Generator, Network};
use ptdf_admm::partition::{self, Partition};
use ptdf_admm::BusId;

pub const CASES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/");

pub const PGLIB57: &str = "pglib_opf_case57_ieee";
pub const PGLIB73: &str = "pglib_opf_case73_ieee_rts";
pub const PGLIB118: &str = "pglib_opf_case118_ieee";
pub const ALL: [&str; 6] = ["tiny2", "tiny3", "tiny5", PGLIB57, PGLIB73, PGLIB118];

pub fn load(name: &str) -> Network {
    case::load_network(format!("{CASES}{name}.m")).unwrap()
}

/// Area tags when the file has several, otherwise the greedy split used by the CLI.
pub fn default_partition(net: &Network) -> Partition {
    match partition::partition_from_areas(net) {
        Ok(p) => p,
        Err(_) => partition::partition_fallback(net, 5, 0).unwrap(),
    }
}

/// Connected network from a spanning tree plus extra edges. Bus 1 is the
/// reference and holds one generator large enough for any demand.
pub fn network(n: usize, tree: &[usize], extra: &[(usize, usize)], b: &[f64], demand: &[f64]) -> Network {
    let buses = (0..n)
        .map(|k| Bus { id: BusId(k as u32 + 1), area_tag: 1, demand: demand[k], is_reference: k == 0 })
        .collect();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|k| (tree[k - 1] % k, k)).collect();
    edges.extend(extra.iter().filter(|(u, w)| u % n != w % n).map(|&(u, w)| (u % n, w % n)));
    let branches = edges
        .iter()
        .enumerate()
        .map(|(k, &(u, w))| Branch {
            from: BusId(u as u32 + 1),
            to: BusId(w as u32 + 1),
            susceptance: b[k % b.len()],
            flow_limit: f64::INFINITY,
            in_service: true,
        })
        .collect();
    let gens = vec![Generator { bus: BusId(1), pmin: 0.0, pmax: 100.0, c2: 0.0, c1: 1.0, c0: 0.0 }];
    Network::from_parts(100.0, buses, branches, gens).unwrap()
}
