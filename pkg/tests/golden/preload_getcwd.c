/* Generated patch: compile as a shared library and preload it into the sample. */
#include <sys/types.h>
#include <stdlib.h>
#include <string.h>

#define STR_getcwd "BOMB"
void *addr_getcwd;
__attribute__((constructor))
static void init_getcwd (void){
    addr_getcwd = (char *) malloc (100);
    strcpy (addr_getcwd, STR_getcwd);
}
char *getcwd(char *buf, size_t size){
    return (char *) addr_getcwd;
}
