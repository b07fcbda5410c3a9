/* Generated patch: compile as a shared library and preload it into the sample. */
#include <sys/types.h>

static int angr_global_var_ptrace = 0;
long ptrace(int request, pid_t pid, void *addr, void *data){
    angr_global_var_ptrace = angr_global_var_ptrace + 1;
    if (angr_global_var_ptrace == 1){
        return 0x0;
    }
    if (angr_global_var_ptrace == 2){
        return -1;
    }
    /* invocations after #2 repeat the last value */
    return -1;
}
