fn main() {
    std::process::exit(dnmn::cli::cli_dispatch(std::env::args_os()));
}
