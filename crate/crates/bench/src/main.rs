fn main() {
    std::process::exit(ckpm_bench::cli::main());
}
