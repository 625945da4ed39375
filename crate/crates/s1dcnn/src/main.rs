use std::process::exit;

fn main() {
    exit(s1dcnn::cli::run(std::env::args_os()))
}
