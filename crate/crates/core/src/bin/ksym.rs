fn main() {
    std::process::exit(ksym::cli::run(std::env::args_os()));
}
