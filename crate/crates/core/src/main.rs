fn main() {
    std::process::exit(vault_core::cli::run_from(std::env::args_os()));
}
