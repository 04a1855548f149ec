//! The gated reward table and result comparison.
//!
//! `cargo run --example rewards`

use tir_sql::reward::{compose, is_order_sensitive, Judgement, RewardConfig};

fn main() {
    let cfg = RewardConfig::default();
    println!("format_ok executable correct | r_format r_exec r_result total");
    for format_ok in [false, true] {
        for executable in [false, true] {
            for correct in [false, true] {
                let b = compose(Judgement { format_ok, executable, correct }, &cfg);
                println!(
                    "{format_ok:>9} {executable:>10} {correct:>7} | {:>8} {:>6} {:>8} {:>5.1}",
                    b.r_format, b.r_exec, b.r_result, b.total
                );
            }
        }
    }
    for sql in ["SELECT a FROM t", "SELECT a FROM t ORDER BY a DESC"] {
        println!("{sql:?} order sensitive: {}", is_order_sensitive(sql));
    }
}
