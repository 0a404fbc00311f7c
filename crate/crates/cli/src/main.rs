fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(restormer_core::cli::dispatch(&args));
}
