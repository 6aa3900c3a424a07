fn main() {
    std::process::exit(egomem::cli::run(std::env::args_os()));
}
